"""Registry of named coefficient families used by the experiment runner."""

from __future__ import annotations

import numpy as np

from .sde_core import CoefficientModel
from .streams import stream_generator


def brownian_shift(theta=0.5, x0=0.0):
    """a = 0, b = theta, sigma = 1: Brownian motion against drifted Brownian motion."""
    theta = float(theta)
    return CoefficientModel(
        drift_a=lambda t, Y: np.zeros_like(Y.current),
        drift_b=lambda t, Y: np.full_like(Y.current, theta),
        sigma=lambda t, Y: 1.0,
        name="brownian_shift",
        sigma_of_time=lambda t: np.ones((1, 1)),
        linear_drift=lambda t: np.zeros((1, 1)),
        params={"theta": theta, "x0": np.array([float(x0)])},
    )


def ou_shift(lam=1.0, theta=1.0, x0=0.0, sigma=1.0):
    """a = -lam Z, b = -lam Z + theta, constant sigma."""
    lam, theta, sigma = float(lam), float(theta), float(sigma)
    return CoefficientModel(
        drift_a=lambda t, Y: -lam * Y.current,
        drift_b=lambda t, Y: -lam * Y.current + theta,
        sigma=lambda t, Y: sigma,
        name="ou_shift",
        sigma_of_time=lambda t: np.full((1, 1), sigma),
        linear_drift=lambda t: np.full((1, 1), -lam),
        params={"lam": lam, "theta": theta, "sigma": sigma, "x0": np.array([float(x0)])},
    )


def path_dependent(lam=0.5, theta=2.0, x0=1.0, sigma=1.0, vol_feedback=0.0):
    """OU reference drift and ``gamma = theta tanh(running mean of Z)``.

    ``b - a = sigma(t, Z) gamma`` so gamma stays bounded by ``theta``. With
    ``vol_feedback > 0`` the diffusion becomes path dependent:
    ``sigma(t, Z) = sigma (1 + vol_feedback tanh(Z(t))^2)``.
    """
    lam, theta, sigma, fb = float(lam), float(theta), float(sigma), float(vol_feedback)

    def vol(t, Y):
        if fb == 0.0:
            return np.full(Y.current.shape + (1,), sigma)
        return (sigma * (1.0 + fb * np.tanh(Y.current) ** 2))[..., None]

    def drift_b(t, Y):
        return -lam * Y.current + vol(t, Y)[..., 0] * theta * np.tanh(Y.running_mean())

    return CoefficientModel(
        drift_a=lambda t, Y: -lam * Y.current,
        drift_b=drift_b,
        sigma=vol,
        name="path_dependent",
        sigma_of_time=(lambda t: np.full((1, 1), sigma)) if fb == 0.0 else None,
        linear_drift=lambda t: np.full((1, 1), -lam),
        params={"lam": lam, "theta": theta, "sigma": sigma, "vol_feedback": fb, "x0": np.array([float(x0)])},
    )


def degenerate_matrix(d=3, m=4, rank=2, theta=0.5, lam=1.0, seed=7, x0=0.5):
    """Constant ``d x m`` diffusion of prescribed rank, ``b = a + sigma theta tanh(P Z)``.

    The system ``sigma gamma = b - a`` has infinitely many solutions when
    ``rank < m``; the pseudo-inverse picks the minimum-norm one.
    """
    d, m, rank = int(d), int(m), int(rank)
    if not 0 <= rank <= min(d, m):
        raise ValueError(f"rank must lie in [0, min(d, m)], got {rank}")
    gen = stream_generator(seed, 0)
    u, _ = np.linalg.qr(gen.standard_normal((d, d)))
    v, _ = np.linalg.qr(gen.standard_normal((m, m)))
    s = np.linspace(1.5, 0.5, rank) if rank else np.zeros(0)
    sig = (u[:, :rank] * s) @ v[:, :rank].T
    proj = gen.standard_normal((m, d)) / np.sqrt(d)
    lam, theta = float(lam), float(theta)

    def drift_b(t, Y):
        g = theta * np.tanh(np.einsum("md,...d->...m", proj, Y.current))
        return -lam * Y.current + np.einsum("dm,...m->...d", sig, g)

    return CoefficientModel(
        drift_a=lambda t, Y: -lam * Y.current,
        drift_b=drift_b,
        sigma=lambda t, Y: sig,
        d=d,
        m=m,
        name="degenerate_matrix",
        sigma_of_time=lambda t: sig,
        linear_drift=lambda t: -lam * np.eye(d),
        params={"d": d, "m": m, "rank": rank, "theta": theta, "lam": lam, "seed": seed,
                "x0": np.full(d, float(x0)), "sigma_matrix": sig},
    )


def galerkin(N=16, lam_power=2.0, lam_scale=1.0, q_power=0.0, c=0.5, x0_scale=1.0):
    """Finite-mode semilinear model; see :mod:`girsanov_lab.spectral_galerkin`."""
    from .spectral_galerkin import galerkin_model

    return galerkin_model(int(N), float(lam_power), float(lam_scale), float(q_power), float(c), float(x0_scale))


REGISTRY = {
    "brownian_shift": (brownian_shift, "a=0, b=theta, sigma=1 (params: theta, x0)"),
    "ou_shift": (ou_shift, "a=-lam Z, b=a+theta, sigma const (params: lam, theta, x0, sigma)"),
    "path_dependent": (path_dependent, "gamma=theta tanh(running mean) (params: lam, theta, x0, sigma, vol_feedback)"),
    "degenerate_matrix": (degenerate_matrix, "rank-deficient d x m sigma (params: d, m, rank, theta, lam, seed, x0)"),
    "galerkin": (galerkin, "N-mode OU + bounded F (params: N, lam_power, lam_scale, q_power, c, x0_scale)"),
}


def build_model(name: str, **params):
    """Instantiate a registered model; unknown names raise KeyError."""
    try:
        factory = REGISTRY[name][0]
    except KeyError:
        raise KeyError(name) from None
    return factory(**params)
