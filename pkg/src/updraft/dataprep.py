"""Patch datasets: slicing, convection filtering, min-max scaling, float16 archives.

Volumes are kept in grid order ``(L, H, W)`` (levels first) throughout;
labels are ``(H, W)`` column-maximum vertical velocity in m/s.

The synthetic storm generator is a stand-in for model output.  Its
statistical link between reflectivity and updraft is made up for testing
and carries no physical claim:

* each storm is an anisotropic Gaussian reflectivity plume whose centre
  drifts linearly with height (tilt) and fades above a random echo top;
* the updraft core sits under the mid-level reflectivity centre with half
  the plume's horizontal width;
* peak updraft grows with echo-top height and core reflectivity, plus noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid_io import Grid3D, read_grid, write_grid

__all__ = [
    "DEFAULT_LEVELS",
    "PatchSample",
    "ScalerParams",
    "SplitManifest",
    "slice_patch",
    "convection_filter",
    "fit_scaler",
    "apply_scaler",
    "invert_scaler",
    "quantize_f16",
    "synth_storms",
    "scene_stream",
    "build_splits",
    "ArrayDataset",
    "ManifestDataset",
    "write_split",
    "load_manifest",
    "make_synthetic_dataset",
]

DEFAULT_LEVELS = np.linspace(0.5, 17.0, 12)
SPLITS = ("train", "val", "test")


@dataclass
class PatchSample:
    x: np.ndarray  # (L, H, W) reflectivity, dBZ before scaling
    y: np.ndarray  # (H, W) column-max w, m/s
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScalerParams:
    min: float
    max: float
    fitted_on: str = "train"

    def __post_init__(self):
        if not (np.isfinite(self.min) and np.isfinite(self.max)):
            raise ValidationError("scaler bounds must be finite")
        if not self.max > self.min:
            raise ValidationError(f"scaler needs max > min, got min={self.min}, max={self.max}")

    def to_dict(self):
        return {"min": self.min, "max": self.max, "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["min"]), float(d["max"]), d.get("fitted_on", "train"))


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list

    def __post_init__(self):
        sets = [set(map(_sample_key, getattr(self, s))) for s in SPLITS]
        for a in range(3):
            for b in range(a + 1, 3):
                if sets[a] & sets[b]:
                    raise ValidationError(f"splits {SPLITS[a]} and {SPLITS[b]} overlap")

    def counts(self):
        return {s: len(getattr(self, s)) for s in SPLITS}

    def fractions(self):
        total = sum(self.counts().values())
        return {s: (n / total if total else 0.0) for s, n in self.counts().items()}


def _sample_key(sample):
    meta = sample.meta if isinstance(sample, PatchSample) else sample
    return (meta.get("source"), tuple(meta.get("origin", ())))


def slice_patch(refl, w, origin, size):
    """Cut an ``H x W`` window at ``origin`` out of co-registered grids.

    The label is the column maximum of ``w`` over the window.
    """
    if refl.dims != w.dims:
        raise ValidationError(f"reflectivity {refl.dims} and w {w.dims} are not co-registered")
    oy, ox = (int(v) for v in origin)
    h, wd = (int(v) for v in size)
    _, ny, nx = refl.dims
    if oy < 0 or ox < 0 or h < 1 or wd < 1 or oy + h > ny or ox + wd > nx:
        raise ValidationError(f"slice origin {origin} size {size} exceeds domain {ny}x{nx}")
    x = refl.values[:, oy:oy + h, ox:ox + wd].astype(np.float32)
    y = w.values[:, oy:oy + h, ox:ox + wd].max(axis=0).astype(np.float32)
    return PatchSample(x=x, y=y, meta={"source": refl.name, "origin": [oy, ox]})


def convection_filter(sample, threshold=10.0):
    """Keep a sample only if some label pixel reaches ``threshold`` m/s."""
    return bool(np.max(sample.y) >= threshold)


def fit_scaler(samples, fitted_on="train"):
    lo, hi = np.inf, -np.inf
    n = 0
    for s in samples:
        x = s.x if isinstance(s, PatchSample) else s
        lo = min(lo, float(np.min(x)))
        hi = max(hi, float(np.max(x)))
        n += 1
    if n == 0:
        raise ValidationError("fit_scaler needs at least one training sample")
    return ScalerParams(lo, hi, fitted_on)


def apply_scaler(x, scaler):
    """Linear map ``min -> 0, max -> 1``; values outside are clipped."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip((x - scaler.min) / (scaler.max - scaler.min), 0.0, 1.0)


def invert_scaler(x, scaler):
    return np.asarray(x, dtype=np.float64) * (scaler.max - scaler.min) + scaler.min


def quantize_f16(x):
    """Archive scaled values as IEEE half precision.

    Raises
    ------
    ValidationError
        Values are non-finite or outside [0, 1].
    """
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValidationError("cannot archive non-finite values")
    if np.any((x < 0) | (x > 1)):
        raise ValidationError("archived values must be scaled into [0, 1]")
    return x.astype(np.float16)


def synth_storms(
    seed,
    shape=(64, 64),
    n_storms=3,
    intensity=(40.0, 65.0),
    levels=DEFAULT_LEVELS,
    spacing=3.0,
    name="synthetic",
):
    """Generate a reflectivity volume and a co-located vertical velocity volume.

    Parameters
    ----------
    seed : int
        Fully determines the output.
    shape : (ny, nx)
    n_storms : int
    intensity : (low, high)
        Range of storm peak reflectivity, dBZ.
    levels : array_like
        Heights, km.
    spacing : float
        Horizontal grid spacing, km.

    Returns
    -------
    refl, w : Grid3D
    """
    if n_storms < 0:
        raise ValidationError("n_storms must be >= 0")
    rng = np.random.default_rng(seed)
    ny, nx = shape
    z = np.asarray(levels, dtype=np.float64)
    yc = np.arange(ny) * spacing
    xc = np.arange(nx) * spacing
    Y = yc[None, :, None]
    X = xc[None, None, :]
    Z = z[:, None, None]

    refl = np.zeros((z.size, ny, nx))
    wmax = np.zeros((ny, nx))
    for _ in range(n_storms):
        cy = rng.uniform(0, yc[-1])
        cx = rng.uniform(0, xc[-1])
        sy = rng.uniform(6.0, 15.0)
        sx = sy * rng.uniform(0.6, 1.4)
        peak = rng.uniform(*intensity)
        top = rng.uniform(6.0, 16.0)
        ty, tx = rng.uniform(-1.2, 1.2, size=2)  # km drift per km of height

        dy = Y - (cy + ty * Z)
        dx = X - (cx + tx * Z)
        horiz = np.exp(-0.5 * ((dy / sy) ** 2 + (dx / sx) ** 2))
        vert = 1.0 / (1.0 + np.exp((Z - top) / 0.8))
        refl = np.maximum(refl, peak * horiz * vert)

        zmid = 0.5 * top
        uy = yc[:, None] - (cy + ty * zmid)
        ux = xc[None, :] - (cx + tx * zmid)
        core = np.exp(-0.5 * ((uy / (0.5 * sy)) ** 2 + (ux / (0.5 * sx)) ** 2))
        strength = 2.5 * (top - 5.0) + 0.4 * (peak - 40.0) + rng.normal(0.0, 1.5)
        wmax = np.maximum(wmax, max(strength, 1.0) * core)

    echo = refl > 5.0
    refl = refl + rng.normal(0.0, 1.0, size=refl.shape) * echo
    refl = np.where(echo, np.maximum(refl, 0.0), 0.0)

    # w profile: column maximum wmax reached at 55% of 12 km, small noise elsewhere
    prof = np.exp(-0.5 * ((Z - 6.6) / 3.0) ** 2)
    prof = prof / prof.max()
    w = wmax[None] * prof + rng.normal(0.0, 0.25, size=refl.shape)

    common = dict(z_coords=z, y_coords=yc, x_coords=xc, height_datum="AGL")
    return (
        Grid3D(name=name, units="dBZ", values=refl, **common),
        Grid3D(name=name, units="m s-1", values=w, **common),
    )


def scene_stream(seed, shape=(64, 64), storms=(1, 5), intensity=(40.0, 65.0), levels=DEFAULT_LEVELS):
    """Endless deterministic sequence of synthetic scenes ``(refl, w)``."""
    ss = np.random.SeedSequence(seed)
    k = 0
    while True:
        child = ss.spawn(1)[0]
        rng = np.random.default_rng(child)
        n = int(rng.integers(storms[0], storms[1] + 1))
        scene_seed = int(rng.integers(0, 2**63 - 1))
        yield synth_storms(scene_seed, shape, n, intensity, levels, name=f"scene{k:06d}")
        k += 1


def build_splits(scenes, counts, patch=(32, 32), threshold=10.0, tries=10, seed=0):
    """Slice one filtered patch per scene until every split is full.

    Scenes are consumed in order and each contributes to a single split, so
    the splits never share source data.

    Returns
    -------
    SplitManifest
        Holding :class:`PatchSample` lists (unscaled).
    """
    rng = np.random.default_rng(seed)
    out = {s: [] for s in SPLITS}
    it = iter(scenes)
    for split in SPLITS:
        while len(out[split]) < counts[split]:
            try:
                refl, w = next(it)
            except StopIteration:
                raise ValidationError(
                    f"ran out of scenes filling {split!r}: got {len(out[split])} of {counts[split]}"
                ) from None
            _, ny, nx = refl.dims
            if patch[0] > ny or patch[1] > nx:
                raise ValidationError(f"patch {patch} larger than scene {ny}x{nx}")
            for _ in range(tries):
                origin = (int(rng.integers(0, ny - patch[0] + 1)), int(rng.integers(0, nx - patch[1] + 1)))
                cand = slice_patch(refl, w, origin, patch)
                if convection_filter(cand, threshold):
                    out[split].append(cand)
                    break
    return SplitManifest(**out)


class ArrayDataset:
    """In-memory scaled volumes ``(N, L, H, W)`` and labels ``(N, H, W)``."""

    def __init__(self, x, y):
        self.x = np.asarray(x)
        self.y = np.asarray(y)
        if len(self.x) != len(self.y):
            raise ValidationError("x and y hold different sample counts")

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.x[idx].astype(np.float64), self.y[idx].astype(np.float64)

    def all(self):
        return self.batch(np.arange(len(self)))

    @property
    def sample_shape(self):
        return self.x.shape[1:]


class ManifestDataset:
    """Reads archived ZGRID pairs on demand, one batch at a time."""

    def __init__(self, path):
        self.path = Path(path)
        self.manifest = load_manifest(self.path)
        self.root = self.path.parent
        self.samples = self.manifest["samples"]
        self.scaler = ScalerParams.from_dict(self.manifest["scaler"])
        if not self.samples:
            raise ValidationError(f"{path}: manifest lists no samples")

    def __len__(self):
        return len(self.samples)

    def _load(self, i):
        s = self.samples[i]
        x = read_grid(self.root / s["x_path"]).values.astype(np.float64)
        y = read_grid(self.root / s["y_path"]).values[0].astype(np.float64)
        return x, y

    def batch(self, idx):
        pairs = [self._load(int(i)) for i in idx]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def all(self):
        return self.batch(range(len(self)))

    @property
    def sample_shape(self):
        return read_grid(self.root / self.samples[0]["x_path"]).dims


def _patch_grid(values, name, units, levels, origin, spacing):
    h, w = values.shape[-2:]
    vals = values if values.ndim == 3 else values[None]
    return Grid3D(
        name=name,
        units=units,
        values=vals,
        z_coords=levels if values.ndim == 3 else [0.0],
        y_coords=(origin[0] + np.arange(h)) * spacing,
        x_coords=(origin[1] + np.arange(w)) * spacing,
        height_datum="AGL",
    )


def write_split(samples, split, scaler, out_dir, levels=DEFAULT_LEVELS, spacing=3.0):
    """Scale, archive as float16 ZGRID pairs and write ``<split>.json``.

    Manifest schema: ``{"split", "samples": [{"x_path", "y_path", "origin",
    "source"}], "scaler": {"min", "max"}}`` with paths relative to the
    manifest.
    """
    out_dir = Path(out_dir)
    shard = out_dir / split
    shard.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        xq = quantize_f16(apply_scaler(s.x, scaler))
        xg = _patch_grid(xq, s.meta.get("source", split), "1", levels, s.meta["origin"], spacing)
        yg = _patch_grid(s.y.astype(np.float32), s.meta.get("source", split), "m s-1", levels, s.meta["origin"], spacing)
        xp, yp = f"{split}/x_{k:06d}.zgrid", f"{split}/y_{k:06d}.zgrid"
        write_grid(xg, out_dir / xp)
        write_grid(yg, out_dir / yp)
        entries.append({"x_path": xp, "y_path": yp, "origin": list(s.meta["origin"]), "source": s.meta.get("source")})
    manifest = {"split": split, "samples": entries, "scaler": scaler.to_dict()}
    path = out_dir / f"{split}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: manifest is not valid JSON ({exc})") from exc
    for key in ("split", "samples", "scaler"):
        if key not in data:
            raise ValidationError(f"{path}: manifest lacks {key!r}")
    return data


def make_synthetic_dataset(seed=0, counts=None, patch=(32, 32), scene_shape=(64, 64), levels=DEFAULT_LEVELS, archive=True):
    """In-memory counterpart of ``synth`` + ``prepare``.

    Returns ``({split: ArrayDataset}, ScalerParams, SplitManifest)``; with
    ``archive`` the scaled volumes pass through float16 like the on-disk
    archive does.
    """
    counts = counts or {"train": 512, "val": 128, "test": 128}
    scenes = scene_stream(seed, scene_shape, levels=levels)
    manifest = build_splits(scenes, counts, patch, seed=seed)
    scaler = fit_scaler(manifest.train)
    data = {}
    for split in SPLITS:
        samples = getattr(manifest, split)
        if not samples:
            continue
        x = np.stack([apply_scaler(s.x, scaler) for s in samples])
        if archive:
            x = quantize_f16(x)
        y = np.stack([s.y for s in samples]).astype(np.float32)
        data[split] = ArrayDataset(x, y)
    return data, scaler, manifest
