"""Volume I/O, Hounsfield normalisation, degradation, patch sampling and phantoms.

Volumes are stored as a pair of files: ``<name>.rvh`` holds a canonical
JSON header and ``<name>.rvd`` the raw little-endian voxels, row-major over
``(D, H, W)`` (W varies fastest).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, ShapeError

log = logging.getLogger(__name__)

MAGIC = "RVOL1"
DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
MAX_VOXELS = 1 << 32
HU_WINDOW = (-1024 - 200, 3071)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeError(f"volume must be a non-empty 3-D grid, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class NormSpec:
    lo: float = -1150.0
    hi: float = 350.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"normalisation window needs lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class DegradeSpec:
    factors: tuple = (4, 2, 2)


@dataclass(frozen=True)
class PatchSpec:
    size: int = 128
    paired: bool = True


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def volume_paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".rvh", ".rvd") else path
    return stem.with_suffix(".rvh"), stem.with_suffix(".rvd")


def save_volume(v: Volume, path, dtype: str | None = None) -> Path:
    """Write `v` as ``path.rvh`` + ``path.rvd``; returns the header path."""
    if dtype is None:
        dtype = "i16" if np.issubdtype(v.voxels.dtype, np.integer) else "f32"
    if dtype not in DTYPES:
        raise ConfigError(f"unsupported volume dtype {dtype!r}")
    hdr_path, raw_path = volume_paths(path)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    vox = v.voxels
    if dtype == "i16" and not np.issubdtype(vox.dtype, np.integer):
        vox = np.rint(vox)
    header = {
        "magic": MAGIC,
        "dims": [int(n) for n in v.shape],
        "spacing_mm": list(v.spacing),
        "dtype": dtype,
        "byte_order": "LE",
        "meta": v.meta,
    }
    hdr_path.write_text(canonical_json(header))
    raw_path.write_bytes(np.ascontiguousarray(vox, dtype=DTYPES[dtype]).tobytes())
    return hdr_path


def load_volume(path) -> Volume:
    hdr_path, raw_path = volume_paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{hdr_path}: header is not valid JSON ({exc})") from None
    if header.get("magic") != MAGIC:
        raise FormatError(f"{hdr_path}: bad magic {header.get('magic')!r}, expected {MAGIC!r}")
    if header.get("byte_order", "LE") != "LE":
        raise FormatError(f"{hdr_path}: only little-endian payloads are supported")
    dtype = header.get("dtype")
    if dtype not in DTYPES:
        raise FormatError(f"{hdr_path}: unknown dtype {dtype!r}")
    dims = header.get("dims")
    if not isinstance(dims, list) or len(dims) != 3 or any(
            not isinstance(d, int) or d < 1 for d in dims):
        raise FormatError(f"{hdr_path}: dims must be three positive integers, got {dims}")
    count = dims[0] * dims[1] * dims[2]
    if count > MAX_VOXELS:
        raise FormatError(f"{hdr_path}: extent {dims} overflows the {MAX_VOXELS}-voxel limit")
    expected = count * DTYPES[dtype].itemsize
    payload = raw_path.read_bytes()
    if len(payload) != expected:
        raise FormatError(f"{raw_path}: payload has {len(payload)} bytes, expected {expected} "
                          f"for dims {dims} ({dtype})")
    vox = np.frombuffer(payload, dtype=DTYPES[dtype]).reshape(dims)
    vox = vox.astype(DTYPES[dtype].newbyteorder("="))
    lo, hi = vox.min(), vox.max()
    if lo < HU_WINDOW[0] or hi > HU_WINDOW[1]:
        warnings.warn(f"{hdr_path.name}: HU range [{lo}, {hi}] is outside the plausible "
                      f"window {list(HU_WINDOW)}", stacklevel=2)
    return Volume(vox, tuple(header.get("spacing_mm", (1.0, 1.0, 1.0))),
                  dict(header.get("meta", {})))


def list_volumes(directory):
    return sorted(Path(directory).glob("*.rvh"))


def normalize(v, spec: NormSpec = NormSpec()) -> np.ndarray:
    """Clip HU to ``[lo, hi]`` and map linearly onto ``[-1, 1]`` (float32)."""
    hu = v.voxels if isinstance(v, Volume) else np.asarray(v)
    hu = np.clip(hu.astype(np.float64), spec.lo, spec.hi)
    return (2.0 * (hu - spec.lo) / (spec.hi - spec.lo) - 1.0).astype(np.float32)


def denormalize(t, spec: NormSpec = NormSpec(), spacing=(1.0, 1.0, 1.0), meta=None) -> Volume:
    a = np.asarray(getattr(t, "data", t), dtype=np.float64)
    a = a.reshape(a.shape[-3:])
    hu = (a + 1.0) * 0.5 * (spec.hi - spec.lo) + spec.lo
    return Volume(hu.astype(np.float32), spacing, dict(meta or {}))


def crop_to_multiple(a: np.ndarray, factors) -> np.ndarray:
    """Drop trailing voxels so every extent is divisible by its factor."""
    keep = tuple(n - n % f for n, f in zip(a.shape[-3:], factors))
    if keep != a.shape[-3:]:
        log.warning("cropping extent %s to %s to fit factors %s", a.shape[-3:], keep,
                    tuple(factors))
    return a[..., :keep[0], :keep[1], :keep[2]]


def degrade(v: np.ndarray, spec: DegradeSpec = DegradeSpec()) -> np.ndarray:
    """Block-mean down-sampling; trailing voxels that do not fill a block are cropped."""
    a = np.asarray(v)
    fz, fy, fx = spec.factors
    if min(spec.factors) < 1:
        raise ConfigError(f"degrade factors must be positive, got {spec.factors}")
    d, h, w = a.shape[-3:]
    if d < fz or h < fy or w < fx:
        raise ShapeError(f"extent {(d, h, w)} is smaller than one {spec.factors} block")
    a = crop_to_multiple(a, spec.factors)
    d, h, w = a.shape[-3:]
    lead = a.shape[:-3]
    blocks = a.reshape(lead + (d // fz, fz, h // fy, fy, w // fx, fx))
    n = len(lead)
    return blocks.mean(axis=(n + 1, n + 3, n + 5)).astype(a.dtype, copy=False)


def smooth(v: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing; the synthetic stand-in for a soft reconstruction kernel."""
    return ndimage.gaussian_filter(np.asarray(v, dtype=np.float32), sigma, mode="nearest")


def _corner(rng, extent, size, step):
    free = extent - size
    if free < 0:
        raise ShapeError(f"volume extent {extent} is smaller than patch size {size}")
    return int(rng.integers(0, free // step + 1)) * step


def sample_patch(volume: np.ndarray, size, rng):
    """Uniformly placed cubic (or per-axis) patch; returns ``(patch, corner)``."""
    size = (size,) * 3 if np.isscalar(size) else tuple(size)
    corner = tuple(_corner(rng, n, s, 1) for n, s in zip(volume.shape, size))
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    return volume[sl], corner


def sample_pair(x_vol: np.ndarray, y_vol: np.ndarray, spec: PatchSpec, rng, scale=(1, 1, 1),
                y_rng=None):
    """Patches from the X (source) and Y (target) volumes.

    `spec.size` is the Y-domain patch size; the X patch is ``size / scale``.
    Paired mode returns aligned patches (Y corner a multiple of `scale`, X
    corner the Y corner divided by it).  Unpaired mode draws both corners
    independently.  Returns ``(x_patch, y_patch, y_corner)``.
    """
    ysize = (spec.size,) * 3
    for n, s, f in zip(ysize, ysize, scale):
        if s % f:
            raise ShapeError(f"patch size {s} is not divisible by scale factor {f}")
    xsize = tuple(s // f for s, f in zip(ysize, scale))
    if spec.paired:
        ycorner = tuple(_corner(rng, n, s, f) for n, s, f in zip(y_vol.shape, ysize, scale))
        xcorner = tuple(c // f for c, f in zip(ycorner, scale))
        for n, c, s in zip(x_vol.shape, xcorner, xsize):
            if c + s > n:
                raise ShapeError(f"source volume extent {x_vol.shape} cannot hold the "
                                 f"aligned patch at {xcorner}")
        xp = x_vol[tuple(slice(c, c + s) for c, s in zip(xcorner, xsize))]
        yp = y_vol[tuple(slice(c, c + s) for c, s in zip(ycorner, ysize))]
        return xp, yp, ycorner
    xp, _ = sample_patch(x_vol, xsize, rng)
    yp, ycorner = sample_patch(y_vol, ysize, y_rng or rng)
    return xp, yp, ycorner


def make_phantom(dims, rng, noise_hu=20.0) -> np.ndarray:
    """Synthetic chest-like HU volume (int16): body, lungs, vessels, nodules, noise."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ConfigError(f"phantom dims must be three extents >= 8, got {dims}")
    d, h, w = dims
    zz, yy, xx = np.meshgrid(*(np.linspace(-1, 1, n) for n in dims), indexing="ij")
    hu = np.full(dims, -1000.0)

    body = (yy / 0.85) ** 2 + (xx / 0.95) ** 2 < 1
    hu[body] = 40.0
    for side in (-1, 1):
        cx = side * rng.uniform(0.35, 0.45)
        lung = ((xx - cx) / rng.uniform(0.3, 0.38)) ** 2 + (yy / rng.uniform(0.55, 0.65)) ** 2 \
            + (zz / 1.2) ** 2 < 1
        hu[lung & body] = -850.0

    for _ in range(rng.integers(4, 9)):
        # vessel: tube along a random direction through a random point
        p = rng.uniform(-0.6, 0.6, size=3)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        rel = np.stack([zz - p[0], yy - p[1], xx - p[2]])
        along = np.tensordot(u, rel, axes=1)
        dist2 = (rel ** 2).sum(0) - along ** 2
        hu[(dist2 < rng.uniform(0.03, 0.07) ** 2) & body] = rng.uniform(30, 200)

    for _ in range(rng.integers(2, 6)):
        c = rng.uniform(-0.6, 0.6, size=3)
        r = rng.uniform(0.05, 0.15)
        blob = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 < r ** 2
        hu[blob & body] = rng.uniform(-100, 100)

    hu = ndimage.gaussian_filter(hu, 0.7)
    hu += rng.normal(0.0, noise_hu, size=dims)
    return np.clip(np.rint(hu), -1024, 3071).astype(np.int16)


def tile_starts(extent: int, size: int, step: int):
    """Tile origins along one axis; the last tile is clamped to end at `extent`."""
    if size > extent:
        raise ShapeError(f"patch size {size} is larger than volume extent {extent}")
    starts = list(range(0, extent - size + 1, step))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def ramp_window(size: int, ramp: int) -> np.ndarray:
    """1-D blend weights: raised-cosine ramps of length `ramp` at both ends, 1 inside.

    Weights are strictly positive, so every voxel keeps a non-zero weight sum.
    """
    w = np.ones(size)
    ramp = min(ramp, size // 2)
    if ramp > 0:
        i = np.arange(ramp)
        up = 0.5 - 0.5 * np.cos(np.pi * (i + 0.5) / ramp)
        w[:ramp] = up
        w[size - ramp:] = up[::-1]
    return w


def _tiling(shape, patch, overlap):
    if not 0.0 <= overlap <= 0.5:
        raise ConfigError(f"overlap must lie in [0, 0.5], got {overlap}")
    patch = (patch,) * 3 if np.isscalar(patch) else tuple(int(p) for p in patch)
    for ax, n, p in zip("DHW", shape, patch):
        if p > n:
            raise ShapeError(f"patch size {p} along {ax} is larger than volume extent {n}")
    ovl = tuple(int(round(overlap * p)) for p in patch)
    starts = [tile_starts(n, p, max(1, p - o)) for n, p, o in zip(shape, patch, ovl)]
    return patch, ovl, starts


def blend_weight_sum(shape, patch, overlap, scale=(1, 1, 1)) -> np.ndarray:
    """Accumulated (un-normalised) blend weight per output voxel."""
    patch, ovl, starts = _tiling(shape, patch, overlap)
    out_shape = tuple(n * s for n, s in zip(shape, scale))
    win = _window3(patch, ovl, scale)
    wsum = np.zeros(out_shape)
    for z in starts[0]:
        for y in starts[1]:
            for x in starts[2]:
                wsum[_out_slice((z, y, x), patch, scale)] += win
    return wsum


def _window3(patch, ovl, scale):
    wz, wy, wx = (ramp_window(p * s, o * s) for p, o, s in zip(patch, ovl, scale))
    return wz[:, None, None] * wy[None, :, None] * wx[None, None, :]


def _out_slice(corner, patch, scale):
    return tuple(slice(c * s, (c + p) * s) for c, p, s in zip(corner, patch, scale))


def sliding_window_infer(volume: np.ndarray, model_fn, patch, overlap: float = 0.25,
                         scale=None) -> np.ndarray:
    """Apply `model_fn` tile by tile and blend overlapping outputs.

    `model_fn` maps a (pd, ph, pw) array to an array of the same extent times
    `scale` (inferred from the first tile when not given).  Overlapping tiles
    are blended with raised-cosine ramps and divided by the accumulated weight,
    so the normalised weights sum to one at every voxel.  With zero overlap on
    an exact tiling the output equals the per-tile outputs bit for bit.
    """
    vol = np.asarray(volume)
    patch, ovl, starts = _tiling(vol.shape, patch, overlap)
    acc = wsum = win = None
    for z in starts[0]:
        for y in starts[1]:
            for x in starts[2]:
                corner = (z, y, x)
                tile = vol[tuple(slice(c, c + p) for c, p in zip(corner, patch))]
                out = np.asarray(model_fn(np.ascontiguousarray(tile)))
                if acc is None:
                    if scale is None:
                        scale = tuple(o // p for o, p in zip(out.shape, patch))
                    scale = tuple(int(s) for s in scale)
                    expect = tuple(p * s for p, s in zip(patch, scale))
                    if out.shape != expect or min(scale) < 1:
                        raise ShapeError(f"model maps a {patch} tile to {out.shape}, expected "
                                         f"an integer multiple of the tile extent")
                    acc = np.zeros(tuple(n * s for n, s in zip(vol.shape, scale)))
                    wsum = np.zeros_like(acc)
                    win = _window3(patch, ovl, scale)
                sl = _out_slice(corner, patch, scale)
                acc[sl] += out * win
                wsum[sl] += win
    return (acc / wsum).astype(np.float32)
