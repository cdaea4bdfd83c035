"""Exponential-martingale weights for a change of drift.

For a reference path ``Z`` driven by ``W`` the log-weight at node ``k`` is

    log rho_k = sum_{i<k} gamma_i . dW_i  -  1/2 sum_{i<k} |gamma_i|^2 dt_i

with ``gamma_i = gamma(t_i, Z[:i+1])`` evaluated at the left node (Ito sums).
Weights stay in the log domain throughout.

Truncation at level ``n`` keeps the steps whose left node satisfies
``cumulative quad < n``; the first node where the cumulative quad reaches
``n`` is the stopping node ``tau``. Because the indicator is decided at the
left node, the kept quad can overshoot ``n`` by the quad of the crossing step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drift_algebra import GammaField, scalar_pseudo_inverse, pseudo_inverse
from .exceptions import DriftIntegrabilityError, ModelError, NumericError
from .sde_core import (
    BrownianPath,
    CoefficientModel,
    PathPrefix,
    SamplePath,
    exact_linear_solution,
    integrate_euler,
    require_additive,
)


def iter_prefixes(path: SamplePath, stop=None):
    """Yield ``(i, t_i, prefix)`` for the left nodes of every step."""
    grid = path.grid
    times = grid.nodes
    dts = grid.dt
    integral = np.zeros(path.values.shape[:-2] + (path.d,))
    stop = grid.n_steps if stop is None else stop
    for i in range(stop):
        yield i, times[i], PathPrefix(times, path.values, i, integral)
        integral = integral + path.values[..., i, :] * dts[i]


def gamma_along(field: GammaField, z: SamplePath) -> np.ndarray:
    """gamma at the left node of every step, shape ``(..., n_steps, m)``.

    Raises ModelError at the first node where ``sigma gamma = b - a`` fails.
    """
    out = np.empty(z.values.shape[:-2] + (z.grid.n_steps, field.model.m))
    for i, t, prefix in iter_prefixes(z):
        ev = field.evaluate(t, prefix)
        if not np.all(ev.consistent):
            worst = float(np.max(ev.residual))
            raise ModelError(f"sigma gamma = b - a has no solution (residual {worst:.3g})", node=i)
        out[..., i, :] = ev.gamma
    return out


@dataclass(frozen=True, eq=False)
class LogWeightLedger:
    """Per-step pieces of a log-weight.

    ``stoch_increments[i] = sign * gamma_i . dW_i`` and
    ``quad_increments[i] = |gamma_i|^2 dt_i``.
    """

    grid: object
    stoch_increments: np.ndarray
    quad_increments: np.ndarray
    sign: int = 1

    @property
    def n_steps(self) -> int:
        return self.stoch_increments.shape[-1]

    def _prepend_zero(self, x):
        return np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)

    @property
    def cumulative_stoch(self) -> np.ndarray:
        return self._prepend_zero(self.stoch_increments)

    @property
    def cumulative_quad(self) -> np.ndarray:
        return self._prepend_zero(self.quad_increments)

    @property
    def log_rho(self) -> np.ndarray:
        """log rho at every node, shape ``(..., n_nodes)``; 0 at the first node."""
        return self.cumulative_stoch - 0.5 * self.cumulative_quad

    @property
    def log_rho_T(self) -> np.ndarray:
        return np.sum(self.stoch_increments, axis=-1) - 0.5 * np.sum(self.quad_increments, axis=-1)

    @property
    def total_quad(self) -> np.ndarray:
        return np.sum(self.quad_increments, axis=-1)

    def __getitem__(self, item) -> "LogWeightLedger":
        return LogWeightLedger(self.grid, self.stoch_increments[item], self.quad_increments[item], self.sign)


def ledger_from_gamma(gamma, w: BrownianPath, sign: int = 1) -> LogWeightLedger:
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    stoch = sign * np.einsum("...nm,...nm->...n", gamma, w.increments)
    quad = np.einsum("...nm,...nm->...n", gamma, gamma) * w.grid.dt
    return LogWeightLedger(w.grid, stoch, quad, sign)


def accumulate_log_weight(field: GammaField, z: SamplePath, w: BrownianPath, sign: int = 1) -> LogWeightLedger:
    """Ledger of ``sign * int gamma dW - 1/2 int |gamma|^2 ds`` along ``z``.

    ``sign=-1`` gives the reverse exponent used when weighting b-drift paths
    back to the a-drift law.
    """
    if z.grid != w.grid:
        raise ValueError("path and Brownian increments must share a grid")
    gamma = gamma_along(field, z)
    return ledger_from_gamma(gamma, w, sign)


@dataclass(frozen=True, eq=False)
class TruncationState:
    level: float
    tau_index: np.ndarray
    chi: np.ndarray  # (..., n_nodes) bool


def truncation_state(ledger: LogWeightLedger, n: float) -> TruncationState:
    """Indicator ``chi_i = [cumulative quad at node i < n]`` and stopping node tau."""
    if not n > 0:
        raise ValueError(f"truncation level must be positive, got {n}")
    chi = ledger.cumulative_quad < n
    n_nodes = chi.shape[-1]
    crossed = ~chi
    tau = np.where(crossed.any(axis=-1), np.argmax(crossed, axis=-1), n_nodes - 1)
    return TruncationState(float(n), tau, chi)


def truncated_log_weight(ledger: LogWeightLedger, state: TruncationState) -> np.ndarray:
    """log rho^n_T built from the steps whose left node has ``chi = 1``."""
    keep = state.chi[..., :-1]
    stoch = np.sum(np.where(keep, ledger.stoch_increments, 0.0), axis=-1)
    quad = np.sum(np.where(keep, ledger.quad_increments, 0.0), axis=-1)
    return stoch - 0.5 * quad


def kept_quad(ledger: LogWeightLedger, state: TruncationState) -> np.ndarray:
    return np.sum(np.where(state.chi[..., :-1], ledger.quad_increments, 0.0), axis=-1)


def degenerate_event_diagnostic(ledger: LogWeightLedger, n: float) -> dict:
    """Paths that reach level n with a small stochastic part.

    On such paths (truncated, kept stochastic sum ``<= n/4``) the truncated
    weight obeys ``rho^n_T <= exp(-n/4)``. Reports their fraction and the
    largest ``log rho^n_T + n/4`` among them (non-positive when the bound holds).
    """
    state = truncation_state(ledger, n)
    keep = state.chi[..., :-1]
    stoch = np.sum(np.where(keep, ledger.stoch_increments, 0.0), axis=-1)
    truncated = ~state.chi[..., -1]
    event = truncated & (stoch <= n / 4)
    lw = truncated_log_weight(ledger, state)
    worst = float(np.max(lw[event] + n / 4)) if np.any(event) else float("-inf")
    return {"fraction": float(np.mean(event)), "max_excess": worst, "bound_holds": worst <= 0.0}


def apply_drift_shift(w: BrownianPath, field: GammaField, z: SamplePath) -> BrownianPath:
    """Shifted increments ``dW*_i = dW_i - gamma_i dt_i``."""
    if z.grid != w.grid:
        raise ValueError("path and Brownian increments must share a grid")
    gamma = gamma_along(field, z)
    return BrownianPath(w.grid, w.increments - gamma * w.grid.dt[:, None], w.stream_id)


@dataclass(frozen=True)
class DualityReport:
    discrepancy: np.ndarray
    relative: np.ndarray

    @property
    def max_relative(self) -> float:
        return float(np.max(self.relative))


def reverse_log_weight(forward: LogWeightLedger, reverse: LogWeightLedger) -> DualityReport:
    """Check ``log rho(W) + log rho_hat(W*) = 0`` path by path.

    ``forward`` holds ``+gamma.dW``; ``reverse`` holds ``-gamma.dW*`` for the
    shifted increments of the same path. Relative discrepancies are scaled by
    ``1 + sum|gamma.dW| + sum|gamma|^2 dt``.
    """
    if forward.grid != reverse.grid:
        raise ValueError("ledgers live on different grids")
    if forward.sign != 1 or reverse.sign != -1:
        raise ValueError("expected a forward (+1) and a reverse (-1) ledger")
    total = forward.log_rho_T + reverse.log_rho_T
    scale = 1.0 + np.sum(np.abs(forward.stoch_increments), axis=-1) + forward.total_quad
    disc = np.abs(total)
    return DualityReport(disc, disc / scale)


def ls_density_log_weight(model: CoefficientModel, z: SamplePath, sv_cutoff=None) -> np.ndarray:
    """Log-weight from the path alone, without the driving noise.

    ``sum (gamma_b - gamma_a) . sigma^+ dZ - 1/2 sum (|gamma_b|^2 - |gamma_a|^2) dt``
    with ``gamma_a = sigma^+ a`` and ``gamma_b = sigma^+ b`` at the left node.
    Matches the W-based weight when ``sigma^+ sigma = I`` along the path.
    """
    grid = z.grid
    dz = np.diff(z.values, axis=-2)
    batch = z.values.shape[:-2]
    stoch = np.zeros(batch)
    quad = np.zeros(batch)
    for i, t, prefix in iter_prefixes(z):
        sig = model.eval_sigma(t, prefix)
        a = model.eval_vector(model.drift_a, t, prefix)
        b = model.eval_vector(model.drift_b, t, prefix)
        if model.d == 1 and model.m == 1:
            pinv = scalar_pseudo_inverse(sig, sv_cutoff)
        else:
            pinv = pseudo_inverse(sig, sv_cutoff)
        ga = np.einsum("...md,...d->...m", pinv, a)
        gb = np.einsum("...md,...d->...m", pinv, b)
        if not (np.all(np.isfinite(ga)) and np.all(np.isfinite(gb))):
            raise DriftIntegrabilityError("sigma^+ a or sigma^+ b is not finite", node=i)
        dzr = np.einsum("...md,...d->...m", pinv, dz[..., i, :])
        stoch = stoch + np.einsum("...m,...m->...", gb - ga, dzr)
        quad = quad + (np.sum(gb**2, axis=-1) - np.sum(ga**2, axis=-1)) * grid.dt[i]
    out = stoch - 0.5 * quad
    if not np.all(np.isfinite(out)):
        raise NumericError("W-free log-weight is not finite")
    return out


@dataclass(frozen=True)
class NovikovReport:
    sup_quad: float
    mean_exp_half_quad: float


def novikov_report(ledgers) -> NovikovReport:
    """Empirical sup of ``int |gamma|^2`` and mean of ``exp(1/2 int |gamma|^2)``.

    Accepts a batched ledger, a list of ledgers, or an array of total quads.
    Purely descriptive: a finite sample mean never proves the Novikov bound.
    """
    if isinstance(ledgers, LogWeightLedger):
        quads = np.ravel(ledgers.total_quad)
    elif isinstance(ledgers, np.ndarray):
        quads = np.ravel(ledgers)
    else:
        quads = np.concatenate([np.ravel(lg.total_quad) for lg in ledgers])
    if quads.size == 0:
        raise ValueError("empty ensemble")
    half = 0.5 * quads
    top = np.max(half)
    with np.errstate(over="ignore"):
        mean = np.exp(top) * np.mean(np.exp(half - top))
    return NovikovReport(float(np.max(quads)), float(mean))


def pathwise_truncated_solution(model: CoefficientModel, x_path: SamplePath, w: BrownianPath, n: float, field=None, restart=None) -> SamplePath:
    """Glue ``X`` up to its stopping node with the a-drift dynamics afterwards.

    ``x_path`` is a b-drift path driven by ``w``. Up to the first node where
    ``int |gamma(s, X)|^2 ds`` reaches ``n`` the result equals ``X``; from there
    on it follows ``dY = a dt + sigma(t) dW`` restarted at ``X(tau)`` with the
    same increments. The restart uses the exact linear solution map when the
    model declares a linear reference drift and Euler-Maruyama otherwise.

    A custom ``restart(start, history, w)`` receives the node index, the path
    values (valid on nodes ``0..start``) and the increments, and returns the
    values on nodes ``start..``.
    """
    require_additive(model)
    if x_path.grid != w.grid:
        raise ValueError("path and Brownian increments must share a grid")
    field = field or GammaField(model)
    gamma = gamma_along(field, x_path)
    state = truncation_state(ledger_from_gamma(gamma, w), n)
    grid = x_path.grid
    restart = restart or _default_restart(model)

    single = x_path.values.ndim == 2
    xv = x_path.values.reshape((-1,) + x_path.values.shape[-2:])
    inc = np.broadcast_to(w.increments, xv.shape[:1] + w.increments.shape[-2:])
    tau = np.reshape(state.tau_index, -1)
    # a crossing at the final node leaves no steps to restart
    stopped = ~np.reshape(state.chi[..., -1], -1) & (tau < grid.n_steps)
    out = np.array(xv, copy=True)
    for k in np.unique(tau[stopped]):
        sel = np.flatnonzero(stopped & (tau == k))
        out[sel, k:, :] = restart(int(k), xv[sel], BrownianPath(grid, inc[sel]))
    return SamplePath(grid, out[0] if single else out.reshape(x_path.values.shape))


def _default_restart(model: CoefficientModel):
    def linear(start, history, w):
        s = w.grid.nodes[start]
        y = history[..., start, :]
        return exact_linear_solution(model.linear_drift, model.sigma_of_time, s, y, w).values

    def euler(start, history, w):
        grid = w.grid
        batch = w.increments.shape[:-2]
        vals = integrate_euler(
            lambda t, p: model.eval_vector(model.drift_a, t, p),
            lambda t, p: np.broadcast_to(model.sigma_of_time(t), batch + (model.d, model.m)),
            history[..., start, :],
            grid,
            w.increments,
            start=start,
            buffer=history,
        )
        return vals[..., start:, :]

    return linear if model.linear_drift is not None else euler
