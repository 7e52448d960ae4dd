"""Raw network outputs to SHASH parameters, and the floored weighted NLL.

The network emits four maps per pixel.  Location and skewness are taken as
is; scale and tailweight go through ``exp(x / (10 e))`` so that large
initial activations cannot overflow.  The per-pixel loss is

    w(y) * -log(p + eps),   p = SHASH density at the label,

with ``w(y) = weight_above`` where ``y >= threshold`` and 1 elsewhere.  The
scalar loss is the plain mean over pixels (and batch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import shash
from .errors import ValidationError

__all__ = [
    "SLOPE",
    "WeightPolicy",
    "LossConfig",
    "transform",
    "nll",
    "nll_grad",
    "naive_exp_transform",
]

SLOPE = 1.0 / (10.0 * math.e)


@dataclass(frozen=True)
class WeightPolicy:
    threshold: float = 0.0
    weight_above: float = 1.0
    weight_below: float = 1.0

    def __post_init__(self):
        if self.threshold < 0:
            raise ValidationError("weight threshold must be >= 0")
        if self.weight_above < 1:
            raise ValidationError("weight_above must be >= 1")
        if self.weight_below != 1:
            raise ValidationError("weight_below is fixed at 1")

    def weights(self, y):
        y = np.asarray(y, dtype=np.float64)
        return np.where(y >= self.threshold, self.weight_above, self.weight_below)


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-7
    weight_policy: WeightPolicy = field(default_factory=WeightPolicy)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be > 0")

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "weight_threshold": self.weight_policy.threshold,
            "weight_above": self.weight_policy.weight_above,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            epsilon=float(d.get("epsilon", 1e-7)),
            weight_policy=WeightPolicy(
                threshold=float(d.get("weight_threshold", 0.0)),
                weight_above=float(d.get("weight_above", 1.0)),
            ),
        )


def naive_exp_transform(x):
    """Unscaled ``exp(x)`` mapping; kept to demonstrate why it is not used."""
    with np.errstate(over="ignore"):
        return np.exp(np.asarray(x, dtype=np.float64))


def _split(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[0] != 4:
        raise ValidationError(f"raw parameter maps need 4 channels on axis 0, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("raw parameter maps must be finite")
    return raw


def transform(raw):
    """Map raw outputs ``(4, ...)`` to :class:`~updraft.shash.ShashParams`."""
    raw = _split(raw)
    return shash.ShashParams(
        mu=raw[0],
        sigma=np.exp(raw[1] * SLOPE),
        gamma=raw[2],
        tau=np.exp(raw[3] * SLOPE),
    )


def _check_shapes(params, y):
    y = np.asarray(y, dtype=np.float64)
    if params.shape != y.shape:
        raise ValidationError(f"parameter maps {params.shape} and labels {y.shape} differ in shape")
    return y


def nll(params, y, cfg=LossConfig()):
    """Weighted, floored negative log likelihood.

    Returns
    -------
    loss : float
        Mean of the per-pixel map.
    per_pixel : ndarray
        ``w(y) * -log(p + eps)``.
    """
    y = _check_shapes(params, y)
    p = shash.pdf(params, y)
    per_pixel = -np.log(p + cfg.epsilon) * cfg.weight_policy.weights(y)
    return float(per_pixel.mean()), per_pixel


def nll_grad(raw, y, cfg=LossConfig()):
    """Loss and its gradient with respect to the raw maps.

    Returns
    -------
    loss : float
    grad : ndarray, same shape as ``raw``
    """
    raw = _split(raw)
    params = transform(raw)
    y = _check_shapes(params, y)
    z, asinh_z, u = shash._core(params, y)
    logp = shash.log_pdf(params, y)
    eps = cfg.epsilon
    w = cfg.weight_policy.weights(y)
    with np.errstate(under="ignore", over="ignore"):
        p = np.exp(logp)
        per_pixel = -np.log(p + eps) * w
        # d(-log(p+eps))/dlogp = -p/(p+eps); exactly zero once p underflows
        ratio = np.where(p > 0, 1.0 / (1.0 + eps * np.exp(-logp)), 0.0)
        s = np.sinh(u)
        c = np.cosh(u)
        dlu = np.tanh(u) - s * c
    live = ratio > 0
    dlu = np.where(live, dlu, 0.0)
    one_z2 = 1.0 + z * z
    dl_dz = dlu * params.tau / np.sqrt(one_z2) - z / one_z2
    dl_dmu = -dl_dz / params.sigma
    dl_dsigma = -1.0 / params.sigma - z * dl_dz / params.sigma
    dl_dgamma = -dlu
    dl_dtau = 1.0 / params.tau + dlu * asinh_z

    scale = -(ratio * w) / y.size
    grad = np.empty_like(raw)
    grad[0] = scale * dl_dmu
    grad[1] = scale * dl_dsigma * params.sigma * SLOPE
    grad[2] = scale * dl_dgamma
    grad[3] = scale * dl_dtau * params.tau * SLOPE
    return float(per_pixel.mean()), grad
