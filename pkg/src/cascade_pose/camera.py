"""Pinhole projection, bilinear raster sampling and plane-induced warps.

Integer pixel coordinates address pixel centres. Rasters are ``(H, W)`` or
``(H, W, C)`` arrays; ``uv`` coordinates are ``(column, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateWarp
from .pose import Pose, compose

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )


def project(K: Intrinsics, X):
    """Project a camera-frame point; ``None`` when it is behind the camera."""
    X = np.asarray(X, dtype=np.float64)
    if X[2] <= EPS_DEPTH:
        return None
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def project_points(K: Intrinsics, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project`. Returns ``(uv, in_front)``; behind points get NaN."""
    X = np.asarray(X, dtype=np.float64)
    z = X[:, 2]
    front = z > EPS_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(front, z, np.nan)
        uv = np.stack([K.fx * X[:, 0] / zs + K.cx, K.fy * X[:, 1] / zs + K.cy], axis=1)
    return uv, front


def sample_bilinear(raster, uv):
    """Bilinear sample at one location; ``None`` outside ``[0, w-1] x [0, h-1]``."""
    vals, inside = sample_bilinear_many(raster, np.asarray(uv, dtype=np.float64).reshape(1, 2))
    if not inside[0]:
        return None
    return vals[0]


def sample_bilinear_many(raster, uv) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``raster`` at ``uv`` (N, 2). Outside samples are zero with ``inside`` False."""
    raster = np.asarray(raster)
    squeeze = raster.ndim == 2
    if squeeze:
        raster = raster[:, :, None]
    h, w, c = raster.shape
    u = uv[:, 0]
    v = uv[:, 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (uc - x0)[:, None]
    ay = (vc - y0)[:, None]
    out = (raster[y0, x0] * (1 - ax) + raster[y0, x1] * ax) * (1 - ay) + (
        raster[y1, x0] * (1 - ax) + raster[y1, x1] * ax
    ) * ay
    out[~inside] = 0
    if squeeze:
        out = out[:, 0]
    return out, inside


def plane_homography(
    src_pose: Pose, dst_pose: Pose, K_src: Intrinsics, K_dst: Intrinsics, plane_depth: float
) -> np.ndarray:
    """Homography mapping src pixels to dst pixels, induced by the plane z = plane_depth
    (fronto-parallel in the src camera)."""
    if plane_depth <= 0:
        raise ValueError("plane_depth must be positive")
    rel = compose(dst_pose, src_pose.inverse())
    n = np.array([0.0, 0.0, 1.0])
    A = rel.s * rel.R + np.outer(rel.t, n) / plane_depth
    return K_dst.matrix @ A @ np.linalg.inv(K_src.matrix)


def warp_view(
    src: np.ndarray,
    src_pose: Pose,
    dst_pose: Pose,
    K: Intrinsics,
    plane_depth: float,
    K_dst: Intrinsics | None = None,
    fill: float = 0.0,
) -> np.ndarray:
    """Resample ``src`` as seen from ``dst_pose`` through the plane at ``plane_depth``.

    Pixels that map outside ``src`` are set to ``fill``.
    """
    K_dst = K_dst or K
    H = plane_homography(src_pose, dst_pose, K, K_dst, plane_depth)
    if np.linalg.cond(H) > 1e12:
        raise DegenerateWarp("plane homography is near-singular")
    Hinv = np.linalg.inv(H)
    return apply_homography(src, Hinv, (K_dst.height, K_dst.width), fill=fill)


def apply_homography(src: np.ndarray, dst_to_src: np.ndarray, out_shape, fill: float = 0.0) -> np.ndarray:
    """Bilinear inverse-mapping warp: ``out[p] = src[dst_to_src @ p]``."""
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    m = dst_to_src @ pts
    with np.errstate(divide="ignore", invalid="ignore"):
        u = m[0] / m[2]
        v = m[1] / m[2]
    bad = ~(np.isfinite(u) & np.isfinite(v)) | (m[2] <= 0)
    u = np.where(bad, -1e6, u)
    v = np.where(bad, -1e6, v)
    return _remap(src, u.reshape(h, w), v.reshape(h, w), fill)


def _remap(src: np.ndarray, u: np.ndarray, v: np.ndarray, fill: float) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    coords = np.stack([v, u])
    sh, sw = src.shape[:2]
    # order=1 map_coordinates already interpolates inside [0, n-1]; mask the rest
    outside = (u < -1e-9) | (v < -1e-9) | (u > sw - 1 + 1e-9) | (v > sh - 1 + 1e-9)
    if src.ndim == 2:
        out = ndimage.map_coordinates(src, coords, order=1, mode="nearest")
        out[outside] = fill
        return out
    chans = [ndimage.map_coordinates(src[..., c], coords, order=1, mode="nearest") for c in range(src.shape[2])]
    out = np.stack(chans, axis=-1)
    out[outside] = fill
    return out


def rotate_about(img: np.ndarray, degrees: float, center=None, fill: float = 0.0) -> np.ndarray:
    """Rotate an image in the camera's in-plane sense about ``center`` (default: image centre).

    A camera-side rotation by +theta about the optical axis maps pixel offset
    ``(du, dv)`` to ``(du cos - dv sin, du sin + dv cos)``.
    """
    h, w = img.shape[:2]
    if center is None:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
    th = np.radians(degrees)
    c, s = np.cos(th), np.sin(th)
    cx, cy = center
    # inverse map: rotate output offsets by -theta
    T = np.array([[c, s, cx - c * cx - s * cy], [-s, c, cy + s * cx - c * cy], [0.0, 0.0, 1.0]])
    return apply_homography(img, T, (h, w), fill=fill)
