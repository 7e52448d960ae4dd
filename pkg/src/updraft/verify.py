"""Deterministic and probabilistic verification metrics.

All reductions run in float64.  Metrics that have no value for the given
selection (no qualifying pixel, empty union, zero variance) raise
:class:`~updraft.errors.UndefinedMetricError` instead of returning NaN.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import shash
from .errors import UndefinedMetricError, ValidationError

__all__ = [
    "PIT_BINS",
    "EvalPairs",
    "rmse",
    "crmse",
    "iou",
    "r_squared",
    "pit",
    "pit_histogram",
    "pitd",
    "iqr_rate",
    "area_fraction",
    "iou_series",
    "area_fraction_series",
    "timeit",
]

PIT_BINS = 10


@dataclass
class EvalPairs:
    """Truth paired with a prediction over a set of evaluated pixels.

    ``pred`` is the deterministic estimate (the distribution median for
    SHASH output).  ``params`` is optional and enables PIT / IQRr.
    ``mask`` selects evaluated pixels (all by default).
    """

    truth: np.ndarray
    pred: np.ndarray
    params: shash.ShashParams | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.float64)
        if self.truth.shape != self.pred.shape:
            raise ValidationError(f"truth {self.truth.shape} and prediction {self.pred.shape} differ")
        if self.mask is None:
            self.mask = np.ones(self.truth.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.truth.shape:
            raise ValidationError("mask shape differs from truth")
        if self.params is not None and self.params.shape != self.truth.shape:
            raise ValidationError("distribution parameter maps differ in shape from truth")

    @classmethod
    def from_params(cls, truth, params, mask=None):
        return cls(truth=truth, pred=shash.median(params), params=params, mask=mask)

    @property
    def n(self):
        return int(self.mask.sum())

    def selected(self):
        return self.truth[self.mask], self.pred[self.mask]

    def selected_params(self):
        if self.params is None:
            raise ValidationError("probabilistic metrics need distribution parameters")
        return self.params[self.mask]


def rmse(pairs):
    y, yhat = pairs.selected()
    if y.size == 0:
        raise UndefinedMetricError("RMSE of an empty selection")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def crmse(pairs, t):
    """RMSE over pixels whose truth is at least ``t``."""
    y, yhat = pairs.selected()
    keep = y >= t
    if not keep.any():
        raise UndefinedMetricError(f"no truth pixel >= {t} for cRMSE")
    return float(np.sqrt(np.mean((y[keep] - yhat[keep]) ** 2)))


def iou(a, b, t):
    """Intersection over union of the masks ``a > t`` and ``b > t``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"IoU fields differ in shape: {a.shape} vs {b.shape}")
    ma = a > t
    mb = b > t
    union = np.count_nonzero(ma | mb)
    if union == 0:
        raise UndefinedMetricError(f"IoU undefined: no pixel exceeds {t} in either field")
    return np.count_nonzero(ma & mb) / union


def r_squared(truth, pred):
    """Coefficient of determination, ``1 - SS_res / SS_tot``."""
    y = np.asarray(truth, dtype=np.float64).ravel()
    yhat = np.asarray(pred, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValidationError("truth and prediction differ in size")
    if y.size < 2:
        raise UndefinedMetricError("R^2 needs at least two pixels")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 undefined for constant truth")
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


def pit(pairs):
    """Predicted CDF evaluated at each truth (selected pixels, flattened)."""
    y, _ = pairs.selected()
    return shash.cdf(pairs.selected_params(), y)


def pit_histogram(values, bins=PIT_BINS):
    """Normalized PIT histogram on equal-width bins over [0, 1].

    Bins are right-exclusive except the last, which includes 1.0.

    Returns
    -------
    freq : ndarray, shape (bins,)
    edges : ndarray, shape (bins + 1,)
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise UndefinedMetricError("PIT histogram of no values")
    if np.any((v < 0) | (v > 1)):
        raise ValidationError("PIT values must lie in [0, 1]")
    idx = np.minimum(np.floor(v * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return counts / v.size, edges


def pitd(freq):
    """Root-mean-square deviation of bin frequencies from ``1/B``."""
    b = np.asarray(freq, dtype=np.float64)
    nb = b.size
    return float(np.sqrt(np.mean((b - 1.0 / nb) ** 2)))


def iqr_rate(pairs):
    """Fraction of truths inside the predicted [q25, q75] (inclusive)."""
    y, _ = pairs.selected()
    if y.size == 0:
        raise UndefinedMetricError("IQR rate of an empty selection")
    params = pairs.selected_params()
    lo = shash.quantile(params, 0.25)
    hi = shash.quantile(params, 0.75)
    return float(np.mean((y >= lo) & (y <= hi)))


def area_fraction(field, t):
    """Percentage of pixels strictly above ``t``."""
    f = np.asarray(field)
    if f.size == 0:
        raise ValidationError("area fraction of an empty field")
    return 100.0 * np.count_nonzero(f > t) / f.size


def iou_series(truths, preds, t):
    """IoU per time step; ``None`` where the union is empty."""
    out = []
    for a, b in zip(truths, preds):
        try:
            out.append(iou(a, b, t))
        except UndefinedMetricError:
            out.append(None)
    return out


def area_fraction_series(fields, t):
    return [area_fraction(f, t) for f in fields]


def timeit(predict_fn, input_shape, batch_size=32, n_batches=30, seed=0, warmup=1):
    """Wall-clock inference time per batch.

    Inputs are generated and held in memory before the clock starts, so only
    the model call is timed.

    Returns
    -------
    dict
        ``timings_ms`` (one entry per batch), ``mean_ms``, ``std_ms``,
        ``per_image_ms``, ``batch_size`` and ``n_batches``.
    """
    rng = np.random.default_rng(seed)
    batches = [rng.uniform(0.0, 1.0, size=(batch_size,) + tuple(input_shape)) for _ in range(n_batches)]
    for b in batches[:warmup]:
        predict_fn(b)
    timings = []
    for b in batches:
        t0 = time.perf_counter()
        predict_fn(b)
        timings.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(timings)
    return {
        "batch_size": batch_size,
        "n_batches": n_batches,
        "timings_ms": timings,
        "mean_ms": float(arr.mean()),
        "std_ms": float(arr.std()),
        "per_image_ms": float(arr.mean() / batch_size),
    }
