"""Importance-sampling estimators under the target drift.

A reference ensemble of a-drift paths together with their log-weights
represents the b-drift law: ``E_b[F(X)] = E_a[F(Z) rho_T]``. The routines here
turn such ensembles into estimates, diagnostics and direct-vs-weighted
comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from . import streams
from ._parallel import default_chunk_size, map_chunks
from .drift_algebra import GammaField
from .girsanov import (
    LogWeightLedger,
    gamma_along,
    ledger_from_gamma,
    truncated_log_weight,
    truncation_state,
)
from .sde_core import CoefficientModel, SamplePath, TimeGrid, euler_maruyama, sample_brownian_batch

PathFunctional = Callable[[SamplePath], np.ndarray]


# -- path functionals ------------------------------------------------------


def terminal_value(path: SamplePath) -> np.ndarray:
    """First component of X(T)."""
    return path.values[..., -1, 0]


def sup_abs(path: SamplePath) -> np.ndarray:
    """max over nodes of |X(t)| (Euclidean norm for vector paths)."""
    return np.max(np.linalg.norm(path.values, axis=-1), axis=-1)


def integral_of_square(path: SamplePath) -> np.ndarray:
    """Left-endpoint sum for the integral of |X(t)|^2 dt."""
    sq = np.sum(path.values[..., :-1, :] ** 2, axis=-1)
    return np.sum(sq * path.grid.dt, axis=-1)


STANDARD_FUNCTIONALS: Dict[str, PathFunctional] = {
    "X(T)": terminal_value,
    "sup|X|": sup_abs,
    "int X^2 dt": integral_of_square,
}


# -- containers ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeightedEnsemble:
    """Batched reference paths with one log-weight per path."""

    paths: SamplePath
    log_weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if self.paths.values.ndim != 3 or self.paths.values.shape[0] != lw.size:
            raise ValueError("need one log-weight per path and paths of shape (n, n_nodes, d)")
        if not np.all(np.isfinite(lw)):
            raise ValueError("log-weights must be finite")
        object.__setattr__(self, "log_weights", lw)

    def __len__(self):
        return self.log_weights.size


@dataclass(frozen=True)
class EstimatorReport:
    estimate: float
    stderr: float
    ess: float
    normalization: float
    n: int


# -- estimators ------------------------------------------------------------


def _shifted_weights(log_weights):
    lw = np.asarray(log_weights, dtype=float).reshape(-1)
    if lw.size == 0:
        raise ValueError("empty ensemble")
    top = np.max(lw)
    return np.exp(lw - top), top


def effective_sample_size(log_weights) -> float:
    """``(sum w)^2 / sum w^2``, computed after subtracting the max log-weight."""
    w, _ = _shifted_weights(log_weights)
    return float(np.sum(w) ** 2 / np.sum(w * w))


def mean_weight(log_weights) -> float:
    w, top = _shifted_weights(log_weights)
    with np.errstate(over="ignore"):
        return float(np.exp(top) * np.mean(w))


def weighted_estimate(values, log_weights, mode: str = "self_normalized") -> EstimatorReport:
    """Estimate ``E_b[F]`` from values ``F(Z_i)`` and log-weights.

    ``unnormalized``: mean of ``F rho`` with the plain sample stderr.
    ``self_normalized``: ``sum F rho / sum rho`` with the delta-method stderr
    ``sqrt(sum wn^2 (F - est)^2)`` where ``wn`` are the normalized weights.
    """
    f = np.asarray(values, dtype=float).reshape(-1)
    w, top = _shifted_weights(log_weights)
    if f.size != w.size:
        raise ValueError("values and log-weights differ in length")
    n = f.size
    ess = float(np.sum(w) ** 2 / np.sum(w * w))
    with np.errstate(over="ignore"):
        norm = float(np.exp(top) * np.mean(w))
    if mode == "unnormalized":
        scale = np.exp(top)
        prod = f * w
        est = float(scale * np.mean(prod))
        se = float(scale * np.std(prod, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    elif mode == "self_normalized":
        wn = w / np.sum(w)
        est = float(np.sum(wn * f))
        se = float(np.sqrt(np.sum(wn**2 * (f - est) ** 2)))
    else:
        raise ValueError(f"mode must be 'unnormalized' or 'self_normalized', got {mode!r}")
    return EstimatorReport(est, se, ess, norm, n)


def estimate_under_target(F: PathFunctional, ens: WeightedEnsemble, mode: str = "self_normalized") -> EstimatorReport:
    """Weighted estimate of ``E[F(X)]`` under the b-drift law."""
    if len(ens) == 0:
        raise ValueError("empty ensemble")
    return weighted_estimate(F(ens.paths), ens.log_weights, mode)


def plain_estimate(values) -> EstimatorReport:
    f = np.asarray(values, dtype=float).reshape(-1)
    if f.size == 0:
        raise ValueError("empty sample")
    se = float(np.std(f, ddof=1) / np.sqrt(f.size)) if f.size > 1 else 0.0
    return EstimatorReport(float(np.mean(f)), se, float(f.size), 1.0, f.size)


@dataclass(frozen=True)
class MartingaleTest:
    mean: float
    stderr: float
    z_score: float
    passed: bool


def martingale_test(ens, threshold: float = 3.0) -> MartingaleTest:
    """Test ``E[rho_T] = 1`` with the unnormalized sample mean.

    Accepts a WeightedEnsemble, a ledger or an array of log-weights.
    """
    if isinstance(ens, WeightedEnsemble):
        lw = ens.log_weights
    elif isinstance(ens, LogWeightLedger):
        lw = ens.log_rho_T
    else:
        lw = ens
    rep = weighted_estimate(np.ones(np.size(lw)), lw, "unnormalized")
    diff = rep.estimate - 1.0
    if rep.stderr > 0:
        z = diff / rep.stderr
    else:
        z = 0.0 if diff == 0 else float(np.copysign(np.inf, diff))
    return MartingaleTest(rep.estimate, rep.stderr, float(z), bool(abs(z) <= threshold))


def l1_cauchy_diagnostic(ledgers, levels: Sequence[float]) -> np.ndarray:
    """Empirical ``E|rho^{n_{j+1}}_T - rho^{n_j}_T|`` for increasing levels.

    ``ledgers`` is a batched ledger or a ``(n_paths, n_levels)`` array of
    truncated log-weights already computed at ``levels``.
    """
    levels = [float(n) for n in levels]
    if len(levels) < 2:
        raise ValueError("need at least two truncation levels")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    if isinstance(ledgers, LogWeightLedger):
        logs = np.stack(
            [np.reshape(truncated_log_weight(ledgers, truncation_state(ledgers, n)), -1) for n in levels], axis=-1
        )
    else:
        logs = np.asarray(ledgers, dtype=float)
    rho = np.exp(logs)
    return np.mean(np.abs(np.diff(rho, axis=-1)), axis=0)


# -- ensemble simulation ---------------------------------------------------


def _functional_values(path, functionals):
    return np.stack([np.asarray(F(path), dtype=float).reshape(-1) for F in functionals.values()], axis=-1)


def simulate_reference(
    model: CoefficientModel,
    grid: TimeGrid,
    x0,
    n_paths: int,
    master_seed: int,
    functionals: Dict[str, PathFunctional] = None,
    levels: Sequence[float] = (),
    field: GammaField = None,
    keep_paths: bool = False,
    chunk_size: int = None,
    workers=None,
) -> dict:
    """Simulate weighted a-drift paths; path ``j`` uses stream ``j``.

    Returns arrays keyed ``log_weight``, ``total_quad``, ``F`` (per functional
    columns), ``truncated`` (log rho^n_T per level) and, when requested, ``paths``.
    """
    functionals = functionals or {}
    field = field or GammaField(model)
    chunk_size = chunk_size or default_chunk_size(n_paths, grid.n_nodes, max(model.d, model.m))

    def run(lo, hi):
        w = sample_brownian_batch(grid, model.m, master_seed, np.arange(lo, hi), streams.REFERENCE)
        z = euler_maruyama(model, "a", x0, w)
        ledger = ledger_from_gamma(gamma_along(field, z), w)
        out = {
            "log_weight": ledger.log_rho_T,
            "total_quad": ledger.total_quad,
            "F": _functional_values(z, functionals) if functionals else np.zeros((hi - lo, 0)),
            "truncated": np.stack(
                [truncated_log_weight(ledger, truncation_state(ledger, n)) for n in levels], axis=-1
            )
            if len(levels)
            else np.zeros((hi - lo, 0)),
        }
        if keep_paths:
            out["paths"] = z.values
        return out

    return map_chunks(run, n_paths, chunk_size, workers)


def simulate_direct(
    model: CoefficientModel,
    grid: TimeGrid,
    x0,
    n_paths: int,
    master_seed: int,
    functionals: Dict[str, PathFunctional],
    substream: int = streams.DIRECT,
    chunk_size: int = None,
    workers=None,
) -> np.ndarray:
    """Functional values on b-drift Euler paths, shape ``(n_paths, n_functionals)``."""
    chunk_size = chunk_size or default_chunk_size(n_paths, grid.n_nodes, max(model.d, model.m))

    def run(lo, hi):
        w = sample_brownian_batch(grid, model.m, master_seed, np.arange(lo, hi), substream)
        return {"F": _functional_values(euler_maruyama(model, "b", x0, w), functionals)}

    return map_chunks(run, n_paths, chunk_size, workers)["F"]


def weighted_ensemble(model, grid, x0, n_paths, master_seed, **kwargs) -> WeightedEnsemble:
    """Materialized reference ensemble (paths kept in memory)."""
    res = simulate_reference(model, grid, x0, n_paths, master_seed, keep_paths=True, **kwargs)
    meta = {"model": model.name, "grid": grid, "seed": master_seed}
    return WeightedEnsemble(SamplePath(grid, res["paths"]), res["log_weight"], meta)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    direct: EstimatorReport
    weighted: EstimatorReport
    replica: EstimatorReport
    z: float
    z_replica: float

    def passed(self, threshold=3.0) -> bool:
        return abs(self.z) <= threshold and abs(self.z_replica) <= threshold


def z_score(r1: EstimatorReport, r2: EstimatorReport) -> float:
    se = np.hypot(r1.stderr, r2.stderr)
    diff = r1.estimate - r2.estimate
    if se == 0:
        return 0.0 if diff == 0 else float(np.copysign(np.inf, diff))
    return float(diff / se)


def compare_estimates(direct_values, weighted_values, log_weights, replica_values, names) -> list:
    rows = []
    for j, name in enumerate(names):
        direct = plain_estimate(direct_values[:, j])
        weighted = weighted_estimate(weighted_values[:, j], log_weights, "self_normalized")
        replica = plain_estimate(replica_values[:, j])
        rows.append(ComparisonRow(name, direct, weighted, replica, z_score(weighted, direct), z_score(direct, replica)))
    return rows


def compare_direct_vs_weighted(
    model: CoefficientModel,
    functionals: Dict[str, PathFunctional],
    grid: TimeGrid,
    n_paths: int,
    master_seed: int,
    x0=None,
    workers=None,
) -> list:
    """Estimate each ``E[F(X)]`` three ways and report z-scores.

    Two independent direct Euler runs of the b-drift equation and one weighted
    a-drift ensemble, each on its own substream of ``master_seed``. Each row
    carries ``z`` (weighted vs direct) and ``z_replica`` (direct vs direct).
    """
    if x0 is None:
        x0 = model.params.get("x0", np.zeros(model.d))
    ref = simulate_reference(model, grid, x0, n_paths, master_seed, functionals, workers=workers)
    direct = simulate_direct(model, grid, x0, n_paths, master_seed, functionals, streams.DIRECT, workers=workers)
    replica = simulate_direct(model, grid, x0, n_paths, master_seed, functionals, streams.DIRECT_REPLICA, workers=workers)
    return compare_estimates(direct, ref["F"], ref["log_weight"], replica, list(functionals))
