"""Sinh-arcsinh-normal (SHASH) distribution.

With ``z = (y - mu) / sigma`` and ``u = tau * asinh(z) - gamma`` the density is::

    f(y) = tau / (sigma * sqrt(2 pi)) * cosh(u) / sqrt(1 + z**2) * exp(-sinh(u)**2 / 2)

so ``sinh(u)`` is standard normal and ``F(y) = Phi(sinh(u))``.  Quantiles
increase with ``gamma`` (positive gamma skews right); ``tau < 1`` gives
heavier tails than the normal.  ``gamma = 0, tau = 1`` is Normal(mu, sigma).

Every function broadcasts over array-valued parameters and evaluates in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

__all__ = [
    "ShashParams",
    "pdf",
    "log_pdf",
    "cdf",
    "quantile",
    "median",
    "sample",
    "norm_cdf",
    "norm_ppf",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)


@dataclass(frozen=True)
class ShashParams:
    """Location, scale, skewness and tailweight (scalars or same-shape maps)."""

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        for name in ("mu", "sigma", "gamma", "tau"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    def validate(self):
        for name in ("mu", "sigma", "gamma", "tau"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"SHASH {name} must be finite")
        if np.any(self.sigma <= 0):
            raise DomainError("SHASH sigma must be > 0")
        if np.any(self.tau <= 0):
            raise DomainError("SHASH tau must be > 0")

    @classmethod
    def stack(cls, arr):
        """Build from an array whose leading axis holds (mu, sigma, gamma, tau)."""
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[0], arr[1], arr[2], arr[3])

    def as_array(self):
        return np.stack(np.broadcast_arrays(self.mu, self.sigma, self.gamma, self.tau))

    @property
    def shape(self):
        return np.broadcast_shapes(self.mu.shape, self.sigma.shape, self.gamma.shape, self.tau.shape)

    def __getitem__(self, idx):
        mu, sigma, gamma, tau = np.broadcast_arrays(self.mu, self.sigma, self.gamma, self.tau)
        return ShashParams(mu[idx], sigma[idx], gamma[idx], tau[idx])


def norm_cdf(x):
    """Standard normal CDF via the complementary error function."""
    return special.ndtr(x)


def norm_ppf(p):
    """Inverse standard normal CDF."""
    return special.ndtri(p)


def _log_cosh(u):
    a = np.abs(u)
    return a + np.log1p(np.exp(-2.0 * a)) - _LOG2


def _core(params, y):
    y = np.asarray(y, dtype=np.float64)
    z = (y - params.mu) / params.sigma
    asinh_z = np.arcsinh(z)
    u = params.tau * asinh_z - params.gamma
    return z, asinh_z, u


def log_pdf(params, y):
    """Log density, evaluated term by term so far-tail values stay finite."""
    z, _, u = _core(params, y)
    with np.errstate(over="ignore"):
        s = np.sinh(u)
        return (
            np.log(params.tau)
            - np.log(params.sigma)
            - _LOG_SQRT_2PI
            + _log_cosh(u)
            - 0.5 * np.log1p(z * z)
            - 0.5 * s * s
        )


def pdf(params, y):
    """Probability density (per unit of ``y``)."""
    with np.errstate(under="ignore"):
        return np.exp(log_pdf(params, y))


def cdf(params, y):
    _, _, u = _core(params, y)
    with np.errstate(over="ignore"):
        return norm_cdf(np.sinh(u))


def quantile(params, p):
    """Inverse CDF; ``p`` must lie strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0) | ~(p < 1)):
        raise DomainError("quantile probability must lie in (0, 1)")
    w = (np.arcsinh(norm_ppf(p)) + params.gamma) / params.tau
    return params.mu + params.sigma * np.sinh(w)


def median(params):
    return params.mu + params.sigma * np.sinh(params.gamma / params.tau)


def sample(params, rng, size=None):
    """Draw variates by transforming standard normals.

    ``size`` defaults to the broadcast parameter shape.
    """
    if size is None:
        size = params.shape
    z = rng.standard_normal(size)
    return params.mu + params.sigma * np.sinh((np.arcsinh(z) + params.gamma) / params.tau)
