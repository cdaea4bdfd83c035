"""Drift difference through the diffusion: solving ``sigma gamma = b - a``.

The canonical solution is ``gamma = sigma^+ (b - a)`` with ``sigma^+`` the
Moore-Penrose pseudo-inverse. For a scalar diffusion this reduces to
``1/sigma`` when sigma is nonzero and ``0`` otherwise, so gamma vanishes
whenever the two drifts coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError
from .sde_core import CoefficientModel, PathPrefix


def default_cutoff(singular_values, shape) -> np.ndarray:
    """Relative numerical-rank cutoff ``1e-12 * s_max * max(d, m)``."""
    s_max = singular_values[..., 0] if singular_values.shape[-1] else np.zeros(singular_values.shape[:-1])
    return 1e-12 * s_max * max(shape)


@dataclass(frozen=True, eq=False)
class SvdResult:
    """Thin SVD truncated at the numerical rank.

    ``left_vectors`` is ``d x r`` (columns ``u^(i)``), ``right_vectors`` is
    ``m x r`` (columns ``v^(i)``), ``singular_values`` has length ``r``.
    """

    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    rank: int
    cutoff: float

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def svd(M, cutoff=None) -> SvdResult:
    """Rank-revealing SVD of a single ``d x m`` matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    cut = float(default_cutoff(s, M.shape)) if cutoff is None else float(cutoff)
    if cut < 0:
        raise ValueError("cutoff must be non-negative")
    r = int(np.count_nonzero(s > cut))
    return SvdResult(s[:r].copy(), u[:, :r].copy(), vt[:r].T.copy(), r, cut)


def pseudo_inverse(M, cutoff=None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse, batched over leading axes.

    Singular values ``<= cutoff`` count as zero. ``cutoff=None`` uses the
    relative default ``1e-12 * s_max * max(d, m)`` per matrix; a number is an
    absolute threshold. The zero matrix maps to the zero matrix.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if cutoff is not None and cutoff < 0:
        raise ValueError("cutoff must be non-negative")
    if not np.all(np.isfinite(M)):
        raise NumericError("matrix has non-finite entries")
    d, m = M.shape[-2:]
    if d == 1 and m == 1:
        return scalar_pseudo_inverse(M, cutoff)
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    cut = default_cutoff(s, (d, m)) if cutoff is None else cutoff
    keep = s > np.asarray(cut)[..., None]
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return np.einsum("...ki,...k,...jk->...ij", vt, s_inv, u)


def scalar_pseudo_inverse(sigma, cutoff=None):
    """``1/sigma`` where ``|sigma| > cutoff`` and 0 elsewhere (cutoff defaults to 0)."""
    sigma = np.asarray(sigma, dtype=float)
    cut = 0.0 if cutoff is None else cutoff
    keep = np.abs(sigma) > cut
    return np.where(keep, 1.0 / np.where(keep, sigma, 1.0), 0.0)


def penrose_residuals(M, P) -> dict:
    """Max-abs residuals of the four Penrose identities for candidate ``P = M^+``."""
    MP = M @ P
    PM = P @ M
    return {
        "MPM=M": float(np.max(np.abs(MP @ M - M), initial=0.0)),
        "PMP=P": float(np.max(np.abs(PM @ P - P), initial=0.0)),
        "(MP)^T=MP": float(np.max(np.abs(MP.T - MP), initial=0.0)),
        "(PM)^T=PM": float(np.max(np.abs(PM.T - PM), initial=0.0)),
    }


@dataclass(frozen=True, eq=False)
class ReducedDiffusion:
    tilde_sigma: np.ndarray  # d x r, columns s_j u_j
    basis_v: np.ndarray  # r x m, rows v_j^T

    @property
    def rank(self) -> int:
        return self.tilde_sigma.shape[1]

    def tilde_pinv(self) -> np.ndarray:
        """``(tilde_sigma^T tilde_sigma)^{-1} tilde_sigma^T``; rows are ``u_j^T / s_j``."""
        ts = self.tilde_sigma
        if ts.shape[1] == 0:
            return np.zeros((0, ts.shape[0]))
        return np.linalg.solve(ts.T @ ts, ts.T)


def reduce_diffusion(M, cutoff=None) -> ReducedDiffusion:
    """Full-column-rank factor ``M = tilde_sigma @ basis_v``.

    ``sigma dW = tilde_sigma d(tilde W)`` with ``tilde W = basis_v W`` an
    r-dimensional Wiener process, since the rows of ``basis_v`` are orthonormal.
    """
    res = svd(M, cutoff)
    return ReducedDiffusion(res.left_vectors * res.singular_values, res.right_vectors.T.copy())


@dataclass(frozen=True)
class GammaEvaluation:
    gamma: np.ndarray
    residual: np.ndarray
    consistent: np.ndarray


class GammaField:
    """Evaluator of ``gamma = sigma^+ (b - a)`` for a coefficient model.

    An evaluation is consistent when
    ``|sigma gamma - (b - a)| <= consistency_tol * (1 + |b - a|)``.
    """

    def __init__(self, model: CoefficientModel, sv_cutoff=None, consistency_tol: float = 1e-9):
        if consistency_tol < 0:
            raise ValueError("consistency_tol must be non-negative")
        self.model = model
        self.sv_cutoff = sv_cutoff
        self.consistency_tol = consistency_tol

    def parts(self, t, prefix: PathPrefix):
        """Return ``(sigma, a, b)`` evaluated at ``(t, prefix)``."""
        mdl = self.model
        sig = mdl.eval_sigma(t, prefix)
        a = mdl.eval_vector(mdl.drift_a, t, prefix)
        b = mdl.eval_vector(mdl.drift_b, t, prefix)
        if not (np.all(np.isfinite(sig)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericError("non-finite coefficient value", node=prefix.index)
        return sig, a, b

    def solve(self, sig, rhs) -> GammaEvaluation:
        """gamma = sig^+ rhs together with the consistency diagnostics."""
        if sig.shape[-2:] == (1, 1):
            g = scalar_pseudo_inverse(sig[..., 0, 0], self.sv_cutoff)[..., None] * rhs
            fit = sig[..., 0, 0][..., None] * g
        else:
            g = np.einsum("...md,...d->...m", pseudo_inverse(sig, self.sv_cutoff), rhs)
            fit = np.einsum("...dm,...m->...d", sig, g)
        residual = np.linalg.norm(fit - rhs, axis=-1)
        ok = residual <= self.consistency_tol * (1.0 + np.linalg.norm(rhs, axis=-1))
        return GammaEvaluation(g, residual, ok)

    def evaluate(self, t, prefix: PathPrefix) -> GammaEvaluation:
        sig, a, b = self.parts(t, prefix)
        return self.solve(sig, b - a)


def gamma_at(field: GammaField, t, prefix) -> GammaEvaluation:
    """Evaluate gamma at ``(t, prefix)``.

    ``prefix`` may be a :class:`PathPrefix` or a ``SamplePath``; a sample path
    is evaluated at the node equal to ``t``.
    """
    if not isinstance(prefix, PathPrefix):
        grid = prefix.grid
        prefix = PathPrefix(grid.nodes, prefix.values, grid.index_of(t))
    return field.evaluate(t, prefix)
