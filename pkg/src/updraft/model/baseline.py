"""Linear regression of updraft on composite reflectivity above 30 dBZ."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

__all__ = ["LinearBaseline", "linreg_baseline", "MASK_DBZ"]

MASK_DBZ = 30.0


@dataclass(frozen=True)
class LinearBaseline:
    slope: float
    intercept: float
    mask_dbz: float = MASK_DBZ

    def predict(self, composite):
        """``slope * z + intercept`` where ``z > mask_dbz``, zero elsewhere."""
        z = np.asarray(composite, dtype=np.float64)
        return np.where(z > self.mask_dbz, self.slope * z + self.intercept, 0.0)


def linreg_baseline(composite, w, mask_dbz=MASK_DBZ):
    """Ordinary least squares on the pixels whose composite exceeds ``mask_dbz``.

    Raises
    ------
    ValidationError
        Fewer than two qualifying pixels, or they all share one composite value.
    """
    z = np.asarray(composite, dtype=np.float64).ravel()
    y = np.asarray(w, dtype=np.float64).ravel()
    if z.shape != y.shape:
        raise ValidationError("composite and w differ in size")
    keep = z > mask_dbz
    z, y = z[keep], y[keep]
    if z.size < 2:
        raise ValidationError(f"need at least two pixels above {mask_dbz} dBZ to fit")
    zc = z - z.mean()
    sxx = np.dot(zc, zc)
    if sxx == 0:
        raise ValidationError("composite reflectivity is constant over the fit pixels")
    slope = np.dot(zc, y - y.mean()) / sxx
    return LinearBaseline(float(slope), float(y.mean() - slope * z.mean()), mask_dbz)
