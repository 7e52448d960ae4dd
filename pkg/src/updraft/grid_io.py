"""Portable gridded-field format (ZGRID) and the in-memory grid types.

A ZGRID file is a UTF-8 JSON header terminated by ``b"\\n\\x00"`` followed by
a raw little-endian IEEE-754 payload in row-major ``[z, y, x]`` order::

    {"name": ..., "units": ..., "dims": [nz, ny, nx],
     "z_coords": [...], "y_coords": [...], "x_coords": [...],
     "height_datum": "MSL" | "AGL", "dtype": "f32" | "f16",
     "missing_value": -9999.0}\\n\\x00<payload>

Terrain grids use the same layout with ``nz == 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

__all__ = [
    "Grid3D",
    "TerrainGrid",
    "DEFAULT_MISSING",
    "read_grid",
    "write_grid",
    "read_terrain",
    "write_terrain",
    "composite_max",
]

DEFAULT_MISSING = -9999.0
HEADER_END = b"\n\x00"
DATUMS = ("MSL", "AGL")
_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
_REQUIRED_KEYS = (
    "name",
    "units",
    "dims",
    "z_coords",
    "y_coords",
    "x_coords",
    "height_datum",
    "dtype",
    "missing_value",
)


def _check_ascending(name, coords, n):
    if coords.ndim != 1 or coords.size != n:
        raise ValidationError(f"{name} has length {coords.size}, expected {n}")
    if not np.all(np.isfinite(coords)):
        raise ValidationError(f"{name} contains non-finite entries")
    if n > 1 and not np.all(np.diff(coords) > 0):
        raise ValidationError(f"{name} must be strictly ascending")


@dataclass
class Grid3D:
    """Regular 3-D scalar field with coordinate vectors.

    ``values`` has shape ``(nz, ny, nx)`` and is stored as float32 (or
    float16 for archived datasets) so that a write/read cycle is bit-exact.
    Heights are km; horizontal positions are km unless ``xy_units`` is
    ``"deg"``.
    """

    name: str
    units: str
    values: np.ndarray
    z_coords: np.ndarray
    y_coords: np.ndarray
    x_coords: np.ndarray
    height_datum: str = "AGL"
    missing_value: float = DEFAULT_MISSING
    xy_units: str = "km"

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype != np.float16:
            values = values.astype(np.float32, copy=False)
        self.values = values
        self.z_coords = np.asarray(self.z_coords, dtype=np.float64)
        self.y_coords = np.asarray(self.y_coords, dtype=np.float64)
        self.x_coords = np.asarray(self.x_coords, dtype=np.float64)
        self.missing_value = float(self.missing_value)
        self.validate()

    @property
    def dims(self):
        return tuple(int(n) for n in self.values.shape)

    def validate(self):
        if self.values.ndim != 3:
            raise ValidationError(f"values must be 3-D, got shape {self.values.shape}")
        nz, ny, nx = self.values.shape
        if min(nz, ny, nx) < 1:
            raise ValidationError(f"empty dims {self.values.shape}")
        _check_ascending("z_coords", self.z_coords, nz)
        _check_ascending("y_coords", self.y_coords, ny)
        _check_ascending("x_coords", self.x_coords, nx)
        if self.height_datum not in DATUMS:
            raise ValidationError(f"height_datum must be one of {DATUMS}")
        if self.xy_units not in ("km", "deg"):
            raise ValidationError("xy_units must be 'km' or 'deg'")

    def missing_mask(self):
        """Boolean array flagging missing voxels (sentinel or NaN)."""
        v = self.values
        return (v == self.missing_value) | np.isnan(v)

    def replace(self, **changes):
        kwargs = dict(
            name=self.name,
            units=self.units,
            values=self.values,
            z_coords=self.z_coords,
            y_coords=self.y_coords,
            x_coords=self.x_coords,
            height_datum=self.height_datum,
            missing_value=self.missing_value,
            xy_units=self.xy_units,
        )
        kwargs.update(changes)
        return Grid3D(**kwargs)

    def equals(self, other):
        """Bit-exact comparison of payload and metadata."""
        return (
            isinstance(other, Grid3D)
            and self.name == other.name
            and self.units == other.units
            and self.height_datum == other.height_datum
            and self.xy_units == other.xy_units
            and np.array_equal(self.z_coords, other.z_coords)
            and np.array_equal(self.y_coords, other.y_coords)
            and np.array_equal(self.x_coords, other.x_coords)
            and np.float64(self.missing_value).tobytes()
            == np.float64(other.missing_value).tobytes()
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass
class TerrainGrid:
    """Ground elevation above sea level (km) on a horizontal grid."""

    elevation: np.ndarray
    y_coords: np.ndarray
    x_coords: np.ndarray
    xy_units: str = "km"
    name: str = field(default="terrain")

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=np.float64)
        self.y_coords = np.asarray(self.y_coords, dtype=np.float64)
        self.x_coords = np.asarray(self.x_coords, dtype=np.float64)
        if self.elevation.ndim != 2:
            raise ValidationError("terrain elevation must be 2-D")
        ny, nx = self.elevation.shape
        _check_ascending("y_coords", self.y_coords, ny)
        _check_ascending("x_coords", self.x_coords, nx)
        if not np.all(np.isfinite(self.elevation)):
            raise ValidationError("terrain elevation must be finite")


def _header_dict(grid, dtype_tag):
    header = {
        "name": grid.name,
        "units": grid.units,
        "dims": list(grid.dims),
        "z_coords": grid.z_coords.tolist(),
        "y_coords": grid.y_coords.tolist(),
        "x_coords": grid.x_coords.tolist(),
        "height_datum": grid.height_datum,
        "dtype": dtype_tag,
        "missing_value": grid.missing_value,
    }
    if grid.xy_units != "km":
        header["xy_units"] = grid.xy_units
    return header


def write_grid(grid, path):
    """Write ``grid`` to ``path`` in ZGRID layout.

    Invariants are re-checked before anything touches disk.
    """
    grid.validate()
    dtype_tag = "f16" if grid.values.dtype == np.float16 else "f32"
    header = json.dumps(_header_dict(grid, dtype_tag)).encode("utf-8")
    payload = np.ascontiguousarray(grid.values, dtype=_DTYPES[dtype_tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(HEADER_END)
        fh.write(payload)


def _parse_header(raw, path):
    end = raw.find(HEADER_END)
    if end < 0:
        raise FormatError(f"{path}: no header terminator found")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    missing = [k for k in _REQUIRED_KEYS if k not in header]
    if missing:
        raise FormatError(f"{path}: header lacks keys {missing}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) for d in dims)):
        raise FormatError(f"{path}: dims must be three integers")
    return header, raw[end + len(HEADER_END):]


def read_grid(path):
    """Read a ZGRID file into a :class:`Grid3D`.

    Raises
    ------
    FormatError
        Header missing, not JSON, or lacking required keys.
    ValidationError
        Declared dims disagree with the coordinates or payload length.
    OSError
        The file cannot be read.
    """
    raw = Path(path).read_bytes()
    header, payload = _parse_header(raw, path)
    nz, ny, nx = header["dims"]
    if min(nz, ny, nx) < 1:
        raise ValidationError(f"{path}: empty dims {header['dims']}")
    dtype = _DTYPES[header["dtype"]]
    expected = nz * ny * nx * dtype.itemsize
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: payload has {len(payload)} bytes, dims {header['dims']} need {expected}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    values = values.astype(dtype.newbyteorder("="))
    return Grid3D(
        name=header["name"],
        units=header["units"],
        values=values,
        z_coords=header["z_coords"],
        y_coords=header["y_coords"],
        x_coords=header["x_coords"],
        height_datum=header["height_datum"],
        missing_value=header["missing_value"],
        xy_units=header.get("xy_units", "km"),
    )


def write_terrain(terrain, path):
    grid = Grid3D(
        name=terrain.name,
        units="km",
        values=terrain.elevation[None].astype(np.float32),
        z_coords=[0.0],
        y_coords=terrain.y_coords,
        x_coords=terrain.x_coords,
        height_datum="MSL",
        xy_units=terrain.xy_units,
    )
    write_grid(grid, path)


def read_terrain(path):
    grid = read_grid(path)
    if grid.dims[0] != 1:
        raise ValidationError(f"{path}: terrain grid must have nz == 1, got {grid.dims[0]}")
    return TerrainGrid(
        elevation=grid.values[0].astype(np.float64),
        y_coords=grid.y_coords,
        x_coords=grid.x_coords,
        xy_units=grid.xy_units,
        name=grid.name,
    )


def composite_max(grid):
    """Column maximum over height, ignoring missing voxels.

    Columns with no valid voxel are set to ``grid.missing_value``.
    """
    missing = grid.missing_mask()
    vals = np.where(missing, -np.inf, grid.values.astype(np.float32))
    out = vals.max(axis=0)
    return np.where(np.all(missing, axis=0), np.float32(grid.missing_value), out).astype(np.float32)
