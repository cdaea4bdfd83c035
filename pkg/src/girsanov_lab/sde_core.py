"""Time grids, path containers and SDE integrators.

Paths may carry leading batch axes: a ``SamplePath`` stores values of shape
``(..., n_nodes, d)`` and a ``BrownianPath`` increments of shape
``(..., n_steps, m)``. Every routine here treats the batch axes elementwise,
so one path and an ensemble of paths go through the same code.

Coefficient functionals are called as ``f(t, prefix)`` where ``prefix`` is a
:class:`PathPrefix`. The prefix exposes the whole path buffer together with the
current node index; functionals must only read nodes ``0..index``. This is
not enforced by construction; :func:`check_nonanticipative` probes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .exceptions import NumericError, UnsupportedModelError
from .streams import stream_generator


class TimeGrid:
    """Strictly increasing time mesh ``t0 = nodes[0] < ... < nodes[-1] = T``."""

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        nodes = np.array(nodes, dtype=float).reshape(-1)
        if nodes.size < 2:
            raise ValueError("a time grid needs at least 2 nodes")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("grid nodes must be finite")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        self.nodes = nodes

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t``; ValueError if ``t`` is not a node."""
        hits = np.flatnonzero(self.nodes == t)
        if hits.size == 0:
            hits = np.flatnonzero(np.isclose(self.nodes, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t))))
        if hits.size == 0:
            raise ValueError(f"time {t!r} is not a grid node")
        return int(hits[0])

    def subgrid(self, start: int) -> "TimeGrid":
        return TimeGrid(self.nodes[start:])

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise ValueError("factor must divide the number of steps")
        return TimeGrid(self.nodes[::factor])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def __repr__(self):
        return f"TimeGrid(t0={self.t0}, T={self.T}, n_steps={self.n_steps})"


def make_uniform_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    """Equally spaced grid with ``n_steps + 1`` nodes from ``t0`` to ``T``."""
    if not T > t0:
        raise ValueError(f"need T > t0, got t0={t0}, T={T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    nodes = np.linspace(t0, T, int(n_steps) + 1)
    return TimeGrid(nodes)


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Path values on a grid, shape ``(..., n_nodes, d)``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim < 2 or values.shape[-2] != self.grid.n_nodes:
            raise ValueError(
                f"values must have shape (..., {self.grid.n_nodes}, d), got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("sample path contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-2]

    def at(self, index: int) -> np.ndarray:
        return self.values[..., index, :]

    def __getitem__(self, item) -> "SamplePath":
        """Select paths along the batch axes."""
        return SamplePath(self.grid, self.values[item])


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Wiener increments ``dW_i`` on a grid, shape ``(..., n_steps, m)``."""

    grid: TimeGrid
    increments: np.ndarray
    stream_id: object = None

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.ndim < 2 or inc.shape[-2] != self.grid.n_steps:
            raise ValueError(
                f"increments must have shape (..., {self.grid.n_steps}, m), got {inc.shape}"
            )
        object.__setattr__(self, "increments", inc)

    @property
    def m(self) -> int:
        return self.increments.shape[-1]

    def cumulative(self) -> np.ndarray:
        """W at the grid nodes, starting from 0."""
        w = np.cumsum(self.increments, axis=-2)
        zero = np.zeros(w.shape[:-2] + (1, w.shape[-1]))
        return np.concatenate([zero, w], axis=-2)

    def __getitem__(self, item) -> "BrownianPath":
        sid = self.stream_id
        if isinstance(sid, np.ndarray):
            sid = sid[item]
        return BrownianPath(self.grid, self.increments[item], sid)


def sample_brownian(grid: TimeGrid, m: int, master_seed: int, stream_id: int) -> BrownianPath:
    """Draw one m-dimensional Brownian path from stream ``(master_seed, stream_id)``."""
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    xi = stream_generator(master_seed, stream_id).standard_normal((grid.n_steps, int(m)))
    return BrownianPath(grid, xi * np.sqrt(grid.dt)[:, None], int(stream_id))


def sample_brownian_batch(grid: TimeGrid, m: int, master_seed: int, stream_ids, substream: int = 0) -> BrownianPath:
    """Stack of independent Brownian paths, one per stream id.

    Row ``j`` is identical to ``sample_brownian(grid, m, master_seed, stream_ids[j])``
    when ``substream == 0``.
    """
    stream_ids = np.asarray(stream_ids, dtype=np.int64).reshape(-1)
    sqdt = np.sqrt(grid.dt)[:, None]
    inc = np.empty((stream_ids.size, grid.n_steps, int(m)))
    for row, sid in enumerate(stream_ids):
        gen = stream_generator(master_seed, int(sid), substream)
        inc[row] = gen.standard_normal((grid.n_steps, int(m))) * sqdt
    return BrownianPath(grid, inc, stream_ids)


class PathPrefix:
    """View of a (batched) path buffer at node ``index``.

    ``values`` is the full buffer; only ``values[..., :index + 1, :]`` is
    meaningful to a non-anticipative functional.
    """

    __slots__ = ("times", "values", "index", "_integral")

    def __init__(self, times, values, index, integral=None):
        self.times = times
        self.values = values
        self.index = index
        self._integral = integral

    @property
    def t(self) -> float:
        return float(self.times[self.index])

    @property
    def current(self) -> np.ndarray:
        return self.values[..., self.index, :]

    @property
    def initial(self) -> np.ndarray:
        return self.values[..., 0, :]

    def past(self) -> np.ndarray:
        return self.values[..., : self.index + 1, :]

    def integral(self) -> np.ndarray:
        """Left-endpoint sum approximating the integral of Y over [t0, t]."""
        if self._integral is None:
            i = self.index
            dt = np.diff(self.times[: i + 1])
            self._integral = np.einsum("...nd,n->...d", self.values[..., :i, :], dt)
        return self._integral

    def running_mean(self) -> np.ndarray:
        """Time average of Y over [t0, t]; Y(t0) at the first node."""
        if self.index == 0:
            return self.initial
        return self.integral() / (self.times[self.index] - self.times[0])


Functional = Callable[[float, PathPrefix], np.ndarray]


@dataclass(frozen=True, eq=False)
class CoefficientModel:
    """Pair of SDEs sharing a diffusion: drifts ``a`` (reference) and ``b`` (target).

    ``sigma_of_time`` marks additive noise: when set, ``sigma(t, Y)`` equals
    ``sigma_of_time(t)`` for every path. ``linear_drift`` marks ``a(t, Z) = c(t) Z(t)``
    with ``c = linear_drift(t)`` a ``d x d`` matrix.
    """

    drift_a: Functional
    drift_b: Functional
    sigma: Functional
    d: int = 1
    m: int = 1
    name: str = "model"
    sigma_of_time: Optional[Callable[[float], np.ndarray]] = None
    linear_drift: Optional[Callable[[float], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def drift(self, which: str) -> Functional:
        if which == "a":
            return self.drift_a
        if which == "b":
            return self.drift_b
        raise ValueError(f"drift selector must be 'a' or 'b', got {which!r}")

    def eval_vector(self, fn, t, prefix):
        batch = prefix.values.shape[:-2]
        return np.broadcast_to(np.asarray(fn(t, prefix), dtype=float), batch + (self.d,))

    def eval_sigma(self, t, prefix):
        batch = prefix.values.shape[:-2]
        return np.broadcast_to(np.asarray(self.sigma(t, prefix), dtype=float), batch + (self.d, self.m))


def _as_batch_x0(x0, d, batch_shape):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0[None]
    if x0.shape[-1] != d:
        raise ValueError(f"x0 has dimension {x0.shape[-1]}, model expects {d}")
    return np.broadcast_to(x0, batch_shape + (d,))


def integrate_euler(drift_fn, sigma_fn, x0, grid: TimeGrid, increments, start: int = 0, buffer=None):
    """Euler-Maruyama recursion on a raw buffer.

    ``drift_fn(t, prefix)`` and ``sigma_fn(t, prefix)`` must already return
    arrays of shape ``(..., d)`` and ``(..., d, m)``. Nodes before ``start``
    are taken from ``buffer`` unchanged.
    """
    batch = increments.shape[:-2]
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[-1]
    if buffer is None:
        values = np.zeros(batch + (grid.n_nodes, d))
    else:
        values = np.array(buffer, dtype=float, copy=True)
    values[..., start, :] = x0
    times = grid.nodes
    dts = grid.dt
    integral = np.einsum("...nd,n->...d", values[..., :start, :], dts[:start])
    for i in range(start, grid.n_steps):
        t = times[i]
        prefix = PathPrefix(times, values, i, integral)
        mu = drift_fn(t, prefix)
        sig = sigma_fn(t, prefix)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
            raise NumericError("non-finite coefficient value", node=i)
        x = values[..., i, :]
        nxt = x + mu * dts[i] + np.einsum("...dm,...m->...d", sig, increments[..., i, :])
        if not np.all(np.isfinite(nxt)):
            raise NumericError("Euler step produced a non-finite state", node=i + 1)
        values[..., i + 1, :] = nxt
        integral = integral + x * dts[i]
    return values


def euler_maruyama(model: CoefficientModel, use_drift: str, x0, w: BrownianPath) -> SamplePath:
    """Euler-Maruyama path of ``dX = drift dt + sigma dW`` with ``drift`` = a or b.

    ``X[i+1] = X[i] + drift(t_i, X[:i+1]) dt_i + sigma(t_i, X[:i+1]) dW_i``.
    """
    drift = model.drift(use_drift)
    if w.m != model.m:
        raise ValueError(f"Brownian dimension {w.m} does not match model m={model.m}")
    batch = w.increments.shape[:-2]
    x0 = _as_batch_x0(x0, model.d, batch)
    values = integrate_euler(
        lambda t, p: model.eval_vector(drift, t, p),
        model.eval_sigma,
        x0,
        w.grid,
        w.increments,
    )
    return SamplePath(w.grid, values)


def _matrix_fn(value, rows, cols):
    if callable(value):
        return lambda t: np.broadcast_to(np.asarray(value(t), dtype=float), (rows, cols))
    const = np.broadcast_to(np.asarray(value, dtype=float), (rows, cols))
    return lambda t: const


def exact_linear_solution(c, sigma, s: float, y, w: BrownianPath) -> SamplePath:
    """Solution map of ``dZ = c(t) Z dt + sigma(t) dW`` started at ``Z(s) = y``.

    Returns the path on the nodes ``t >= s``. On each step ``c`` and ``sigma``
    are frozen at the left node, the deterministic propagator ``exp(c dt)`` is
    applied exactly, and the stochastic convolution is replaced by its
    conditional mean given the step increment,
    ``(1/dt) int_0^dt exp(c u) du . sigma dW``. This is exact when c = 0 or
    sigma = 0 and otherwise leaves a zero-mean residual of variance O(dt^3).
    """
    grid = w.grid
    start = grid.index_of(s)
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y[None]
    d = y.shape[-1]
    m = w.m
    c_fn = _matrix_fn(c, d, d)
    s_fn = _matrix_fn(sigma, d, m)
    batch = np.broadcast_shapes(y.shape[:-1], w.increments.shape[:-2])
    n_out = grid.n_nodes - start
    out = np.empty(batch + (n_out, d))
    out[..., 0, :] = y
    aug = np.zeros((2 * d, 2 * d))
    eye = np.eye(d)
    for k, i in enumerate(range(start, grid.n_steps)):
        dt = grid.nodes[i + 1] - grid.nodes[i]
        aug[:d, :d] = c_fn(grid.nodes[i]) * dt
        aug[:d, d:] = eye
        e = expm(aug)
        prop = e[:d, :d]
        noise_gain = e[:d, d:] @ s_fn(grid.nodes[i])
        out[..., k + 1, :] = (
            np.einsum("ij,...j->...i", prop, out[..., k, :])
            + np.einsum("ij,...j->...i", noise_gain, w.increments[..., i, :])
        )
    return SamplePath(grid.subgrid(start), out)


@dataclass
class NonAnticipationReport:
    violations: list
    probed: list

    @property
    def ok(self) -> bool:
        return not self.violations


def check_nonanticipative(functional, path: SamplePath, probe_count: int = 10, rng=None) -> NonAnticipationReport:
    """Probe whether ``functional(t_i, prefix)`` reads nodes after ``i``.

    For randomly chosen nodes with a future, the later values are replaced by
    random noise and the functional is re-evaluated; any change is reported.
    """
    rng = np.random.default_rng(rng)
    grid = path.grid
    candidates = np.arange(grid.n_nodes - 1)
    k = min(int(probe_count), candidates.size)
    probed = np.sort(rng.choice(candidates, size=k, replace=False))
    violations = []
    for i in probed:
        i = int(i)
        base = functional(grid.nodes[i], PathPrefix(grid.nodes, path.values, i))
        perturbed = path.values.copy()
        tail = perturbed[..., i + 1 :, :]
        perturbed[..., i + 1 :, :] = tail + rng.standard_normal(tail.shape) * (1.0 + np.abs(tail))
        again = functional(grid.nodes[i], PathPrefix(grid.nodes, perturbed, i))
        if not np.array_equal(np.asarray(base), np.asarray(again)):
            violations.append(i)
    return NonAnticipationReport(violations, [int(i) for i in probed])


def check_growth_bound(model: CoefficientModel, path: SamplePath, L1: float, L2: float, K=None, use_drift="a", nodes=None):
    """Spot-check the linear growth bound on the coefficients along ``path``.

    Checks ``a_i(t,Y)^2 + sigma_ik(t,Y)^2 <= L1 int_0^t (1+|Y|^2) dK + L2 (1+|Y(t)|^2)``
    componentwise at the given nodes (all nodes by default). ``K`` is a
    non-decreasing function with values in [0, 1]; the default is the uniform
    clock ``(t - t0) / (T - t0)``. Returns the list of violating node indices.
    """
    grid = path.grid
    if K is None:
        K = lambda t: (t - grid.t0) / (grid.T - grid.t0)
    kv = np.array([K(t) for t in grid.nodes])
    if np.any(np.diff(kv) < 0) or kv.min() < 0 or kv.max() > 1:
        raise ValueError("K must be non-decreasing with values in [0, 1]")
    drift = model.drift(use_drift)
    sq = 1.0 + np.sum(path.values**2, axis=-1)
    nodes = range(grid.n_nodes) if nodes is None else nodes
    bad = []
    for i in nodes:
        prefix = PathPrefix(grid.nodes, path.values, i)
        a = model.eval_vector(drift, grid.nodes[i], prefix)
        sig = model.eval_sigma(grid.nodes[i], prefix)
        lhs = a[..., :, None] ** 2 + sig**2
        stieltjes = np.einsum("...n,n->...", sq[..., :i], np.diff(kv[: i + 1]))
        rhs = L1 * stieltjes + L2 * sq[..., i]
        if np.any(lhs > rhs[..., None, None] * (1 + 1e-12)):
            bad.append(int(i))
    return bad


def require_additive(model: CoefficientModel):
    if model.sigma_of_time is None:
        raise UnsupportedModelError(
            f"model {model.name!r} has a path-dependent diffusion; additive noise sigma(t) is required"
        )
