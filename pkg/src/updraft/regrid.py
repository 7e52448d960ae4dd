"""Grid harmonization: nearest-neighbour resampling, block means, MSL to AGL.

Distances are Euclidean in the raw horizontal coordinate units (km, or
degrees when the grid says so); no geodesy is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .grid_io import Grid3D

__all__ = ["KdIndex", "LevelSpec", "nn_resample", "block_mean", "to_agl", "parse_levels"]


class KdIndex:
    """Nearest-neighbour index over 2-D ``(y, x)`` points.

    Equidistant candidates resolve to the lowest source index, matching a
    plain ``argmin`` over squared distances.
    """

    def __init__(self, points, leaf_size=16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ValidationError("KdIndex needs a nonempty (n, 2) point array")
        if leaf_size < 1:
            raise ValidationError("leaf_size must be positive")
        self.points = pts
        self.leaf_size = leaf_size
        self.tree = cKDTree(pts, leafsize=leaf_size, balanced_tree=True)

    def query(self, targets):
        """Index of the nearest source point for each ``(y, x)`` target."""
        q = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
        dist, idx = self.tree.query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        # re-examine every candidate that could tie with the kd-tree answer
        radius = dist * (1.0 + 1e-9) + 1e-12
        cands = self.tree.query_ball_point(q, radius)
        for i, cand in enumerate(cands):
            if len(cand) > 1:
                c = np.asarray(cand, dtype=np.int64)
                d = self.points[c] - q[i]
                d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
                best = c[d2 == d2.min()]
                idx[i] = best.min()
        return idx


@dataclass(frozen=True)
class LevelSpec:
    """Target heights above ground, km."""

    targets: tuple = tuple(np.linspace(0.5, 17.0, 24).tolist())

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64)
        if t.ndim != 1 or t.size < 1:
            raise ValidationError("LevelSpec needs at least one target height")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValidationError("LevelSpec targets must be strictly ascending")
        object.__setattr__(self, "targets", tuple(t.tolist()))


def parse_levels(text):
    """Parse ``"start:stop:count"`` or a comma list into a :class:`LevelSpec`."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"levels must look like start:stop:count, got {text!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        return LevelSpec(tuple(np.linspace(start, stop, count).tolist()))
    return LevelSpec(tuple(float(v) for v in text.split(",")))


def _mesh_points(y, x):
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return np.column_stack([yy.ravel(), xx.ravel()])


def nn_resample(src, dst_coords):
    """Resample every level of ``src`` onto ``(y_coords, x_coords)`` by nearest neighbour."""
    dst_y, dst_x = (np.asarray(c, dtype=np.float64) for c in dst_coords)
    if dst_y.size == 0 or dst_x.size == 0:
        raise ValidationError("destination coordinates are empty")
    index = KdIndex(_mesh_points(src.y_coords, src.x_coords))
    nearest = index.query(_mesh_points(dst_y, dst_x))
    nz = src.dims[0]
    flat = src.values.reshape(nz, -1)
    values = flat[:, nearest].reshape(nz, dst_y.size, dst_x.size)
    return src.replace(values=values, y_coords=dst_y, x_coords=dst_x)


def block_mean(src, factor):
    """Average non-overlapping ``factor x factor`` horizontal blocks.

    Missing voxels are excluded; a block with no valid voxel is missing.
    Trailing partial blocks average whatever pixels they hold.  The coarse
    coordinate is the mean of the block's fine coordinates.
    """
    if int(factor) != factor or factor < 1:
        raise ValidationError("block factor must be a positive integer")
    f = int(factor)
    if f == 1:
        return src.replace()
    nz, ny, nx = src.dims
    missing = src.missing_mask()
    vals = np.where(missing, 0.0, src.values.astype(np.float64))
    valid = (~missing).astype(np.float64)
    ys = np.arange(0, ny, f)
    xs = np.arange(0, nx, f)
    sums = np.add.reduceat(np.add.reduceat(vals, ys, axis=1), xs, axis=2)
    counts = np.add.reduceat(np.add.reduceat(valid, ys, axis=1), xs, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts
    out = np.where(counts > 0, mean, src.missing_value)
    cy = np.add.reduceat(src.y_coords, ys) / np.diff(np.append(ys, ny))
    cx = np.add.reduceat(src.x_coords, xs) / np.diff(np.append(xs, nx))
    return src.replace(values=out, y_coords=cy, x_coords=cx)


def to_agl(src, terrain, levels=LevelSpec()):
    """Re-level an MSL grid onto heights above ground.

    Per column the source heights become ``z - elevation``; values are
    linearly interpolated to ``levels.targets``.  Targets above the highest
    valid level are missing; targets below the lowest valid level take that
    level's value.
    """
    if src.height_datum != "MSL":
        raise ValidationError(f"to_agl expects an MSL grid, got {src.height_datum}")
    if terrain.elevation.shape != src.dims[1:] or not (
        np.array_equal(terrain.y_coords, src.y_coords) and np.array_equal(terrain.x_coords, src.x_coords)
    ):
        raise ValidationError("terrain grid does not match the source horizontal grid")
    targets = np.asarray(levels.targets, dtype=np.float64)
    nz, ny, nx = src.dims
    missing = src.missing_mask()
    vals = src.values.astype(np.float64)
    out = np.full((targets.size, ny, nx), src.missing_value, dtype=np.float64)
    for j in range(ny):
        for i in range(nx):
            ok = ~missing[:, j, i]
            if not ok.any():
                continue
            heights = src.z_coords[ok] - terrain.elevation[j, i]
            col = vals[ok, j, i]
            out[:, j, i] = np.interp(targets, heights, col, left=col[0], right=src.missing_value)
    return src.replace(values=out, z_coords=targets, height_datum="AGL")
