"""Experiment configuration, execution and report serialization.

Configuration files are INI-style: one ``[section]`` per experiment with flat
``key = value`` lines. Reserved keys:

    kind      weights | compare | truncation | galerkin | pseudoinverse
    model     registered model name (all kinds except pseudoinverse)
    t0, T     time interval (default 0, 1)
    n_steps   grid steps
    paths     ensemble size
    seed      master seed (overridable from the command line)
    levels    comma-separated truncation levels
    output    report file stem (default: section name)
    size      max matrix dimension (pseudoinverse)
    count     number of random matrices (pseudoinverse)

Every other key is passed to the model factory as a float parameter
(integers where the value has no decimal point).
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, streams
from .drift_algebra import pseudo_inverse, penrose_residuals, reduce_diffusion
from .exceptions import ConfigError
from .girsanov import (
    gamma_along,
    ledger_from_gamma,
    novikov_report,
    pathwise_truncated_solution,
)
from .drift_algebra import GammaField
from .measure_change import (
    STANDARD_FUNCTIONALS,
    compare_direct_vs_weighted,
    effective_sample_size,
    l1_cauchy_diagnostic,
    martingale_test,
    simulate_reference,
)
from .models import REGISTRY, build_model
from .sde_core import euler_maruyama, make_uniform_grid, sample_brownian_batch
from .spectral_galerkin import SpectralModel, semilinear_equivalence_experiment

KINDS = ("weights", "compare", "truncation", "galerkin", "pseudoinverse")
RESERVED = {"kind", "model", "t0", "T", "n_steps", "paths", "seed", "levels", "output", "size", "count"}
REQUIRED = {
    "weights": ("model", "n_steps", "paths"),
    "compare": ("model", "n_steps", "paths"),
    "truncation": ("model", "n_steps", "paths", "levels"),
    "galerkin": ("model", "n_steps", "paths"),
    "pseudoinverse": (),
}
Z_THRESHOLD = 3.0
PINV_TOL = 1e-10


def _number(text, key):
    try:
        value = float(text) if any(ch in text for ch in ".eE") or text.lower() in ("inf", "nan") else int(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}", key) from None
    return value


@dataclass
class ExperimentConfig:
    name: str
    kind: str
    model: Optional[str] = None
    params: dict = field(default_factory=dict)
    t0: float = 0.0
    T: float = 1.0
    n_steps: int = 0
    paths: int = 0
    master_seed: int = 0
    levels: tuple = ()
    output: Optional[str] = None
    size: int = 8
    count: int = 200
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, name: str, items: dict, seed=None) -> "ExperimentConfig":
        items = {k: str(v).strip() for k, v in items.items()}
        kind = items.get("kind")
        if kind is None:
            raise ConfigError("missing experiment kind", "kind")
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}", "kind")
        for key in REQUIRED[kind]:
            if key not in items:
                raise ConfigError(f"required for kind={kind}", key)
        if seed is not None:
            items["seed"] = str(int(seed))
        cfg = cls(name=name, kind=kind, raw=dict(items))
        cfg.model = items.get("model")
        if cfg.model is not None and cfg.model not in REGISTRY:
            raise ConfigError(f"unknown model {cfg.model!r}", "model")
        cfg.t0 = float(_number(items.get("t0", "0"), "t0"))
        cfg.T = float(_number(items.get("T", "1"), "T"))
        cfg.n_steps = int(_number(items.get("n_steps", "1"), "n_steps"))
        cfg.paths = int(_number(items.get("paths", "1"), "paths"))
        cfg.master_seed = int(_number(items.get("seed", "0"), "seed"))
        cfg.size = int(_number(items.get("size", "8"), "size"))
        cfg.count = int(_number(items.get("count", "200"), "count"))
        cfg.output = items.get("output")
        if "levels" in items:
            cfg.levels = tuple(float(_number(p.strip(), "levels")) for p in items["levels"].split(",") if p.strip())
        cfg.params = {k: _number(v, k) for k, v in items.items() if k not in RESERVED}
        for key in ("n_steps", "paths", "size", "count"):
            if getattr(cfg, key) < 1:
                raise ConfigError("must be a positive integer", key)
        if not cfg.T > cfg.t0:
            raise ConfigError("need T > t0", "T")
        if cfg.kind == "truncation" and (not cfg.levels or any(n <= 0 for n in cfg.levels)):
            raise ConfigError("need at least one positive level", "levels")
        if cfg.kind == "galerkin" and cfg.model != "galerkin":
            raise ConfigError("kind=galerkin needs model=galerkin", "model")
        return cfg

    def echo(self) -> dict:
        """Effective section contents; re-running from it reproduces the report."""
        return dict(sorted(self.raw.items()))


def read_config(text: str, seed=None) -> list:
    """Parse INI text into experiment configs, one per section."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    if not parser.sections():
        raise ConfigError("configuration has no experiment sections")
    return [ExperimentConfig.from_mapping(s, dict(parser.items(s)), seed) for s in parser.sections()]


def config_to_ini(configs) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for cfg in configs:
        parser[cfg.name] = cfg.echo()
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


@dataclass(frozen=True)
class MetricRow:
    metric: str
    value: float
    stderr: Optional[float] = None
    passed: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        if self.stderr is not None:
            object.__setattr__(self, "stderr", float(self.stderr))
        if self.passed is not None:
            object.__setattr__(self, "passed", bool(self.passed))


@dataclass
class RunReport:
    config: dict
    rows: list
    version: str = __version__
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def all_passed(self) -> bool:
        return all(r.passed is not False for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "version": self.version,
            "rows": [
                {"metric": r.metric, "value": r.value, "stderr": r.stderr, "pass": r.passed}
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        rows = [MetricRow(r["metric"], r["value"], r["stderr"], r["pass"]) for r in data["rows"]]
        return cls(dict(data["config"]), rows, data["version"])


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value", "stderr", "pass"])
    for r in report.rows:
        flag = "" if r.passed is None else ("true" if r.passed else "false")
        writer.writerow([r.metric, _fmt(r.value), _fmt(r.stderr), flag])
    return buf.getvalue()


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def write_report(report: RunReport, path, fmt: str = "csv") -> Path:
    """Write ``report`` as CSV or JSON (LF newlines) and return the file path."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    path = Path(path)
    if path.suffix != f".{fmt}":
        path = path.with_name(path.name + f".{fmt}")
    text = report_csv(report) if fmt == "csv" else report_json(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


# -- experiment suites -----------------------------------------------------


def _model(cfg: ExperimentConfig):
    try:
        return build_model(cfg.model, **cfg.params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for model {cfg.model!r}: {exc}", "model") from None
    except ValueError as exc:
        raise ConfigError(str(exc), "model") from None


def _grid(cfg):
    return make_uniform_grid(cfg.t0, cfg.T, cfg.n_steps)


def _bool_row(name, ok):
    return MetricRow(name, 1.0 if ok else 0.0, None, bool(ok))


def _run_weights(cfg, workers):
    model = _model(cfg)
    grid = _grid(cfg)
    res = simulate_reference(model, grid, model.params["x0"], cfg.paths, cfg.master_seed, levels=cfg.levels, workers=workers)
    rows = []
    mt = martingale_test(res["log_weight"], Z_THRESHOLD)
    rows.append(MetricRow("mean_rho_T", mt.mean, mt.stderr, mt.passed))
    rows.append(MetricRow("z_rho_T", mt.z_score, None, None))
    for j, n in enumerate(cfg.levels):
        mtn = martingale_test(res["truncated"][:, j], Z_THRESHOLD)
        rows.append(MetricRow(f"mean_rho_n[{n:g}]", mtn.mean, mtn.stderr, mtn.passed))
    nov = novikov_report(res["total_quad"])
    rows.append(MetricRow("ess", effective_sample_size(res["log_weight"])))
    rows.append(MetricRow("sup_quad", nov.sup_quad))
    rows.append(MetricRow("mean_exp_half_quad", nov.mean_exp_half_quad))
    return rows


def _run_compare(cfg, workers):
    model = _model(cfg)
    grid = _grid(cfg)
    cmp = compare_direct_vs_weighted(model, STANDARD_FUNCTIONALS, grid, cfg.paths, cfg.master_seed, workers=workers)
    return _comparison_rows(cmp)


def _comparison_rows(cmp):
    rows = []
    for r in cmp:
        rows.append(MetricRow(f"direct[{r.name}]", r.direct.estimate, r.direct.stderr))
        rows.append(MetricRow(f"weighted[{r.name}]", r.weighted.estimate, r.weighted.stderr))
        rows.append(MetricRow(f"replica[{r.name}]", r.replica.estimate, r.replica.stderr))
        rows.append(MetricRow(f"z_weighted_vs_direct[{r.name}]", r.z, None, abs(r.z) <= Z_THRESHOLD))
        rows.append(MetricRow(f"z_direct_vs_replica[{r.name}]", r.z_replica, None, abs(r.z_replica) <= Z_THRESHOLD))
    return rows


def _run_truncation(cfg, workers):
    model = _model(cfg)
    grid = _grid(cfg)
    levels = sorted(cfg.levels)
    res = simulate_reference(model, grid, model.params["x0"], cfg.paths, cfg.master_seed, levels=levels, workers=workers)
    quad = res["total_quad"]
    sup = float(np.max(quad))
    rows = []
    fractions = [float(np.mean(quad >= n)) for n in levels]
    for n, frac in zip(levels, fractions):
        rows.append(MetricRow(f"truncated_fraction[{n:g}]", frac))
        mtn = martingale_test(res["truncated"][:, levels.index(n)], Z_THRESHOLD)
        rows.append(MetricRow(f"mean_rho_n[{n:g}]", mtn.mean, mtn.stderr, mtn.passed))
    rows.append(_bool_row("truncated_fraction_nonincreasing", all(b <= a for a, b in zip(fractions, fractions[1:]))))
    rows.append(_bool_row("zero_fraction_above_sup_quad", all(f == 0.0 for n, f in zip(levels, fractions) if n > sup)))
    rows.append(MetricRow("sup_quad", sup))
    if len(levels) >= 2:
        l1 = l1_cauchy_diagnostic(res["truncated"], levels)
        for (lo, hi), v in zip(zip(levels, levels[1:]), l1):
            rows.append(MetricRow(f"l1_cauchy[{lo:g}->{hi:g}]", float(v)))
        rows.append(_bool_row("l1_cauchy_nonincreasing", bool(np.all(np.diff(l1) <= 0))))
    if model.sigma_of_time is not None:
        rows.append(_bool_row("glued_paths_differ_only_when_truncated", _gluing_check(model, grid, cfg, levels)))
    return rows


def _gluing_check(model, grid, cfg, levels, n_check=256):
    n_check = min(n_check, cfg.paths)
    w = sample_brownian_batch(grid, model.m, cfg.master_seed, np.arange(n_check), streams.DIRECT)
    x = euler_maruyama(model, "b", model.params["x0"], w)
    ledger = ledger_from_gamma(gamma_along(GammaField(model), x), w)
    ok = True
    for n in levels:
        xn = pathwise_truncated_solution(model, x, w, n)
        differs = np.max(np.abs(x.values - xn.values), axis=(-2, -1)) > 0
        truncated = ledger.cumulative_quad[..., -1] >= n
        ok &= not np.any(differs & ~truncated)
    return bool(ok)


def _run_galerkin(cfg, workers):
    model = _model(cfg)
    if not isinstance(model, SpectralModel):
        raise ConfigError("kind=galerkin needs a spectral model", "model")
    grid = _grid(cfg)
    rep = semilinear_equivalence_experiment(model, STANDARD_FUNCTIONALS, grid, cfg.paths, cfg.master_seed, workers=workers)
    rows = _comparison_rows(rep.rows)
    rows.append(MetricRow("sup_quad_H", rep.sup_quad, None, rep.sup_quad <= rep.quad_bound))
    rows.append(MetricRow("quad_bound", rep.quad_bound))
    rows.append(MetricRow("max_E_norm", rep.max_e_norm, None, bool(np.isfinite(rep.max_e_norm))))
    rows.append(MetricRow("mean_weight", rep.mean_weight))
    return rows


def random_test_matrices(count, size, gen):
    """Random ``d x m`` matrices (d, m <= size); every third is forced rank deficient."""
    out = []
    for j in range(count):
        d, m = (int(v) for v in gen.integers(1, size + 1, size=2))
        if j % 3 == 2 and min(d, m) > 1:
            r = int(gen.integers(1, min(d, m)))
            M = gen.standard_normal((d, r)) @ gen.standard_normal((r, m))
        elif j % 7 == 6:
            M = np.zeros((d, m))
        else:
            M = gen.standard_normal((d, m))
        out.append(M)
    return out


def closed_form_pseudo_inverses(M) -> list:
    """``M^T (M M^T)^{-1}`` when rank = d and ``(M^T M)^{-1} M^T`` when rank = m."""
    d, m = M.shape
    rank = np.linalg.matrix_rank(M)
    out = []
    if rank == d and rank > 0:
        out.append(np.linalg.solve(M @ M.T, M).T)
    if rank == m and rank > 0:
        out.append(np.linalg.solve(M.T @ M, M.T))
    return out


def pseudoinverse_suite(count=200, size=8, master_seed=0) -> dict:
    """Max residuals over a random matrix family.

    Keys: the four Penrose identities, ``closed_form`` (maximal-rank
    ``M^T (M M^T)^{-1}`` / ``(M^T M)^{-1} M^T``) and ``reduced_norm``
    (``|M^+ v|`` vs ``|tilde_M^+ v|`` on consistent ``v``). The closed forms
    square the condition number, so they are compared relative to ``max|M^+|``.
    """
    gen = streams.stream_generator(master_seed, 0, streams.AUXILIARY)
    worst = {"MPM=M": 0.0, "PMP=P": 0.0, "(MP)^T=MP": 0.0, "(PM)^T=PM": 0.0, "closed_form": 0.0, "reduced_norm": 0.0}
    for M in random_test_matrices(count, size, gen):
        P = pseudo_inverse(M)
        for key, val in penrose_residuals(M, P).items():
            worst[key] = max(worst[key], val)
        d, m = M.shape
        rank = np.linalg.matrix_rank(M)
        for closed in closed_form_pseudo_inverses(M):
            err = float(np.max(np.abs(closed - P))) / max(1.0, float(np.max(np.abs(P))))
            worst["closed_form"] = max(worst["closed_form"], err)
        red = reduce_diffusion(M)
        v = M @ gen.standard_normal(m)
        lhs = np.linalg.norm(P @ v)
        rhs = np.linalg.norm(red.tilde_pinv() @ v)
        worst["reduced_norm"] = max(worst["reduced_norm"], float(abs(lhs - rhs)))
    return worst


def _run_pseudoinverse(cfg, workers):
    worst = pseudoinverse_suite(cfg.count, cfg.size, cfg.master_seed)
    return [MetricRow(f"max_residual[{k}]", v, None, v <= PINV_TOL) for k, v in worst.items()]


_RUNNERS = {
    "weights": _run_weights,
    "compare": _run_compare,
    "truncation": _run_truncation,
    "galerkin": _run_galerkin,
    "pseudoinverse": _run_pseudoinverse,
}


def run_experiment(config: ExperimentConfig, workers=None) -> RunReport:
    """Run one configured experiment.

    Rows depend only on the configuration and seed; ``workers`` changes
    wall-clock time only.
    """
    start = time.perf_counter()
    rows = _RUNNERS[config.kind](config, workers)
    return RunReport(config.echo(), rows, __version__, time.perf_counter() - start)
