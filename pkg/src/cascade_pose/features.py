"""Deterministic multi-scale image features.

Each pyramid level box-downsamples nine raw channels (RGB plus six soft-binned
unsigned gradient orientations) by the level divisor and lifts them to the
level's channel count with a fixed, seeded random linear map.  Learned
features produced elsewhere can be imported through the ``CFPX`` file format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ImageTooSmall

N_COLOR = 3
MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class FeatureConfig:
    # (divisor, channels) per level, fine to coarse
    levels: tuple = ((4, 16), (8, 32), (16, 64))
    orientation_bins: int = 6
    gradient_gain: float = 2.0
    seed: int = 0

    @property
    def divisors(self) -> tuple:
        return tuple(d for d, _ in self.levels)

    def channels(self, div: int) -> int:
        return dict(self.levels)[div]


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    levels: dict = field(default_factory=dict)  # divisor -> (h, w, c) float32
    image_size: tuple = (0, 0)  # (width, height)

    def level(self, div: int) -> np.ndarray:
        try:
            return self.levels[div]
        except KeyError:
            raise DimensionError(f"pyramid has no level with divisor {div}") from None

    @property
    def divisors(self) -> tuple:
        return tuple(sorted(self.levels))

    def shape(self, div: int) -> tuple:
        return self.levels[div].shape


def raw_features(img: np.ndarray, orientation_bins: int = 6, gradient_gain: float = 2.0) -> np.ndarray:
    """Full-resolution (H, W, 3 + bins) raw channels."""
    img = _as_rgb(img)
    gray = img.mean(axis=2)
    p = np.pad(gray, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mag = np.hypot(gx, gy) * gradient_gain
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / orientation_bins)
    lo = np.floor(pos).astype(np.int64) % orientation_bins
    hi = (lo + 1) % orientation_bins
    frac = pos - np.floor(pos)
    grad = np.stack(
        [mag * ((lo == b) * (1 - frac) + (hi == b) * frac) for b in range(orientation_bins)], axis=2
    )
    return np.concatenate([img, grad], axis=2)


def box_downsample(raster: np.ndarray, div: int) -> np.ndarray:
    """Block means over ``div x div`` tiles; partial border tiles average what they cover."""
    h, w = raster.shape[:2]
    oh, ow = math.ceil(h / div), math.ceil(w / div)
    ph, pw = oh * div - h, ow * div - w
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (raster.ndim - 2)
    total = np.pad(raster, pad).reshape(oh, div, ow, div, *raster.shape[2:]).sum(axis=(1, 3))
    count = np.pad(np.ones((h, w)), [(0, ph), (0, pw)]).reshape(oh, div, ow, div).sum(axis=(1, 3))
    if raster.ndim == 3:
        count = count[..., None]
    return total / count


def lift_matrix(n_raw: int, channels: int, seed: int, div: int) -> np.ndarray:
    rng = np.random.default_rng([seed, div, channels, n_raw])
    return rng.normal(size=(n_raw, channels)) / math.sqrt(n_raw)


def unlift(level: np.ndarray, cfg: FeatureConfig, div: int) -> np.ndarray:
    """Recover the raw (3 colour + orientation) channels of a lifted level.

    The lift has full column rank whenever a level carries at least as many
    channels as raw features, so the least-squares inverse is exact up to
    float32 rounding.
    """
    n_raw = N_COLOR + cfg.orientation_bins
    M = lift_matrix(n_raw, cfg.channels(div), cfg.seed, div)
    if M.shape[1] < n_raw:
        raise DimensionError(f"level {div} has fewer channels than raw features")
    return np.asarray(level, dtype=np.float64) @ np.linalg.pinv(M)


def build_pyramid(img: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> FeaturePyramid:
    img = _as_rgb(img)
    h, w = img.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ImageTooSmall(f"image {w}x{h} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    raw = raw_features(img, cfg.orientation_bins, cfg.gradient_gain)
    levels = {}
    for div, ch in cfg.levels:
        small = box_downsample(raw, div)
        M = lift_matrix(raw.shape[2], ch, cfg.seed, div)
        levels[div] = np.ascontiguousarray((small @ M).astype(np.float32))
    return FeaturePyramid(levels, (w, h))


def level_coords(uv: np.ndarray, div: int) -> np.ndarray:
    """Map full-resolution pixel coordinates to texel coordinates of a ``div`` level."""
    return (np.asarray(uv, dtype=np.float64) + 0.5) / div - 0.5


def ncc(a, b) -> float:
    """Zero-mean normalized cross-correlation of two equally sized arrays (0 if either is constant)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("ncc needs two sequences of equal length >= 2")
    a = a - a.mean()
    b = b - b.mean()
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    scale = max(na, nb, 1.0)
    if na <= 1e-12 * scale or nb <= 1e-12 * scale:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# CFPX precomputed-feature files
#
# little-endian: b"CFPX", u32 level count, then per level u32 w, h, c followed
# by w*h*c float32 values, row-major and channels-last.

_MAGIC = b"CFPX"


def save_precomputed(pyr: FeaturePyramid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(pyr.levels)))
        for div in pyr.divisors:
            arr = pyr.levels[div]
            h, w, c = arr.shape
            fh.write(struct.pack("<III", w, h, c))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_precomputed(path, divisors=(4, 8, 16), image_size=None) -> FeaturePyramid:
    """Read a CFPX file. Levels are assigned to ``divisors`` in file order.

    ``image_size`` (width, height), when given, is checked against each level's
    ``ceil(size / divisor)`` raster size.
    """
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: missing CFPX header")
    (n_levels,) = struct.unpack_from("<I", data, 4)
    if n_levels != len(divisors):
        raise DimensionError(f"{path}: {n_levels} levels but {len(divisors)} divisors expected")
    off = 8
    levels = {}
    sizes = []
    for div in divisors:
        if off + 12 > len(data):
            raise FormatError(f"{path}: truncated level header")
        w, h, c = struct.unpack_from("<III", data, off)
        off += 12
        n = w * h * c
        if off + 4 * n > len(data):
            raise FormatError(f"{path}: truncated level payload")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(h, w, c)
        off += 4 * n
        levels[div] = np.ascontiguousarray(arr.astype(np.float32))
        sizes.append((w * div, h * div))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    if image_size is None:
        image_size = sizes[0]
    W, H = image_size
    for div, arr in levels.items():
        if arr.shape[:2] != (math.ceil(H / div), math.ceil(W / div)):
            raise DimensionError(
                f"{path}: level /{div} is {arr.shape[1]}x{arr.shape[0]}, expected "
                f"{math.ceil(W / div)}x{math.ceil(H / div)} for a {W}x{H} image"
            )
    return FeaturePyramid(levels, (W, H))


def _as_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != N_COLOR:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img
