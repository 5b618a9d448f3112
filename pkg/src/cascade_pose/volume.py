"""Feature volumes over the unit object cube and the volume matching cost.

Voxel ``(i, j, k)`` of a ``res^3`` grid has its centre at
``((i + .5) / res - .5, (j + .5) / res - .5, (k + .5) / res - .5)`` and flat
index ``(i * res + j) * res + k``.  Each voxel centre is pushed through a pose,
projected and bilinearly sampled on one pyramid level ("unprojection").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .camera import Intrinsics, project_points, sample_bilinear_many
from .dataset import SupportSet
from .errors import DimensionError, EmptyVolume, FormatError, OutOfView
from .features import FeatureConfig, FeaturePyramid, level_coords
from .metrics import voxel_centers
from .pose import Pose

MIN_VALID_FRACTION = 0.05
VAR_FLOOR = 1e-9  # below this a voxel saw the same (background) value in every view


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    resolution: int
    channels: int
    mean: np.ndarray  # (res^3, C)
    var: np.ndarray  # (res^3, C)
    valid: np.ndarray  # (res^3,) bool
    count: np.ndarray  # (res^3,) views that observed the voxel
    center: tuple = (0.0, 0.0, 0.0)  # object-frame cube centre
    side: float = 1.0  # cube edge length in object units

    def grid(self, name: str = "mean") -> np.ndarray:
        arr = getattr(self, name)
        r = self.resolution
        return arr.reshape((r, r, r) + arr.shape[1:])

    def voxels(self) -> np.ndarray:
        return cube_voxels(self.resolution, self.center, self.side)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


def cube_voxels(res: int, center=(0.0, 0.0, 0.0), side: float = 1.0) -> np.ndarray:
    """Voxel centres of the cube of edge ``side`` around ``center`` (object frame)."""
    return np.asarray(center, dtype=np.float64) + side * voxel_centers(res)


def nearest_views(supports: SupportSet, pose: Pose, k: int = 6) -> list:
    """Indices of the ``k`` supports whose camera centres are closest to ``pose``'s (stable order)."""
    d = np.linalg.norm(supports.camera_centers() - pose.camera_center(), axis=1)
    return [int(i) for i in np.argsort(d, kind="stable")[:k]]


def _sample_view(pyr: FeaturePyramid, K: Intrinsics, pose: Pose, voxels: np.ndarray, div: int):
    uv, front = project_points(K, pose.transform_points(voxels))
    vals, inside = sample_bilinear_many(pyr.level(div), level_coords(uv, div))
    return vals, inside & front


def _projection(pose: Pose) -> np.ndarray:
    P = np.empty((3, 4))
    P[:, :3] = pose.s * pose.R
    P[:, 3] = pose.t
    return P


@numba.njit(cache=True)
def _accumulate_view(F, P, fx, fy, cx, cy, div, voxels, n, mean, m2):
    # Welford update of (n, mean, m2) with one view; sampling mirrors sample_bilinear_many
    Hl, Wl, C = F.shape
    for k in range(voxels.shape[0]):
        x0 = voxels[k, 0]
        x1 = voxels[k, 1]
        x2 = voxels[k, 2]
        X = P[0, 0] * x0 + P[0, 1] * x1 + P[0, 2] * x2 + P[0, 3]
        Y = P[1, 0] * x0 + P[1, 1] * x1 + P[1, 2] * x2 + P[1, 3]
        Z = P[2, 0] * x0 + P[2, 1] * x1 + P[2, 2] * x2 + P[2, 3]
        if Z <= 1e-6:
            continue
        u = (fx * X / Z + cx + 0.5) / div - 0.5
        v = (fy * Y / Z + cy + 0.5) / div - 0.5
        if not (u >= 0.0 and v >= 0.0 and u <= Wl - 1 and v <= Hl - 1):
            continue
        ix = min(int(u), max(Wl - 2, 0))
        iy = min(int(v), max(Hl - 2, 0))
        jx = min(ix + 1, Wl - 1)
        jy = min(iy + 1, Hl - 1)
        ax = u - ix
        ay = v - iy
        n[k] += 1
        for c in range(C):
            f = (F[iy, ix, c] * (1.0 - ax) + F[iy, jx, c] * ax) * (1.0 - ay) + (
                F[jy, ix, c] * (1.0 - ax) + F[jy, jx, c] * ax
            ) * ay
            delta = f - mean[k, c]
            mean[k, c] += delta / n[k]
            m2[k, c] += delta * (f - mean[k, c])


def build_support_volume(
    supports: SupportSet,
    subset,
    res: int,
    div: int,
    feature_cfg: FeatureConfig = FeatureConfig(),
    min_views: int = 2,
) -> FeatureVolume:
    """Per-voxel mean and variance of support features over the views that see the voxel.

    The cube has edge ``supports.diameter`` around ``supports.center``.  Views
    are accumulated in index order, so the result does not depend on the order
    of ``subset``.  ``min_views`` is capped at the subset size, so a one-view
    subset yields a volume with zero variance instead of an empty one.
    """
    subset = sorted(set(int(i) for i in subset))
    if not subset:
        raise ValueError("support subset is empty")
    center = tuple(float(x) for x in supports.center)
    voxels = cube_voxels(res, center, supports.diameter)
    C = feature_cfg.channels(div)
    n = np.zeros(len(voxels), dtype=np.int64)
    mean = np.zeros((len(voxels), C))
    m2 = np.zeros((len(voxels), C))
    for i in subset:
        view = supports.views[i]
        F = np.ascontiguousarray(supports.pyramid(i, feature_cfg).level(div), dtype=np.float64)
        K = view.K
        _accumulate_view(F, _projection(view.pose), K.fx, K.fy, K.cx, K.cy, float(div), voxels, n, mean, m2)
    need = min(min_views, len(subset))
    valid = n >= need
    if not valid.any():
        raise EmptyVolume("no voxel is observed by enough support views")
    var = np.maximum(m2 / np.maximum(n, 1)[:, None], 0.0)
    mean[n == 0] = 0.0
    return FeatureVolume(res, C, mean, var, valid, n, center, supports.diameter)


def unproject_target(
    target: FeaturePyramid, K: Intrinsics, hypothesis: Pose, res: int, div: int,
    center=(0.0, 0.0, 0.0), side: float = 1.0,
) -> FeatureVolume:
    """Target features sampled at the voxel centres placed by ``hypothesis``."""
    voxels = cube_voxels(res, center, side)
    vals, ok = _sample_view(target, K, hypothesis, voxels, div)
    if ok.mean() < MIN_VALID_FRACTION:
        raise OutOfView("hypothesis projects the object cube mostly outside the target view")
    C = vals.shape[1]
    return FeatureVolume(
        res, C, vals, np.zeros_like(vals), ok, ok.astype(np.int64), tuple(float(x) for x in center), float(side)
    )


def consistent_voxels(support_vol: FeatureVolume, quantile: float | None) -> np.ndarray:
    """Valid voxels whose mean support variance is within the lowest ``quantile``.

    Zero-variance voxels are excluded first: they saw plain background in
    every support view, which says nothing about what the target sees there.
    ``None`` keeps every valid voxel.
    """
    if quantile is None or quantile >= 1.0:
        return support_vol.valid.copy()
    v = support_vol.var.mean(axis=1)
    cand = support_vol.valid & (v > VAR_FLOOR)
    if not cand.any():
        return support_vol.valid.copy()
    thresh = np.quantile(v[cand], quantile)
    return cand & (v <= thresh)


def matching_cost(
    target_vol: FeatureVolume, support_vol: FeatureVolume, lam_var: float = 0.0, consistency: float | None = None
) -> float:
    """Mean squared feature distance (per channel) over jointly valid voxels, lower is better.

    With ``consistency`` set, only the most photo-consistent fraction of the
    support voxels (see :func:`consistent_voxels`) enters the mean.
    """
    if (target_vol.resolution, target_vol.channels) != (support_vol.resolution, support_vol.channels):
        raise DimensionError(
            f"volume shapes differ: {target_vol.resolution}^3x{target_vol.channels} vs "
            f"{support_vol.resolution}^3x{support_vol.channels}"
        )
    joint = target_vol.valid & support_vol.valid
    if joint.mean() < MIN_VALID_FRACTION:
        return float("inf")
    if consistency is not None:
        joint &= consistent_voxels(support_vol, consistency)
    diff = target_vol.mean[joint] - support_vol.mean[joint]
    cost = float((diff * diff).sum(axis=1).mean() / target_vol.channels)
    if lam_var:
        cost += lam_var * float(support_vol.var[joint].mean())
    return cost


def variance_weights(var: np.ndarray, eps: float | None) -> np.ndarray:
    """Per-voxel, per-channel weights ``1 / (var + eps * mean(var))`` scaled to mean 1.

    ``eps=None`` gives uniform weights (plain L2).
    """
    var = np.asarray(var, dtype=np.float64)
    if eps is None or var.size == 0:
        return np.ones_like(var)
    w = 1.0 / (var + eps * max(float(var.mean()), VAR_FLOOR))
    return w / w.mean()


@numba.njit(cache=True)
def _fused_cost(F, Hl, Wl, P, fx, fy, cx, cy, div, voxels, smean, weight, svar_mean, lam_var):
    N = voxels.shape[0]
    C = smean.shape[1]
    acc = 0.0
    accv = 0.0
    joint = 0
    for k in range(N):
        x0 = voxels[k, 0]
        x1 = voxels[k, 1]
        x2 = voxels[k, 2]
        X = P[0, 0] * x0 + P[0, 1] * x1 + P[0, 2] * x2 + P[0, 3]
        Y = P[1, 0] * x0 + P[1, 1] * x1 + P[1, 2] * x2 + P[1, 3]
        Z = P[2, 0] * x0 + P[2, 1] * x1 + P[2, 2] * x2 + P[2, 3]
        if Z <= 1e-6:
            continue
        u = (fx * X / Z + cx + 0.5) / div - 0.5
        v = (fy * Y / Z + cy + 0.5) / div - 0.5
        if not (u >= 0.0 and v >= 0.0 and u <= Wl - 1 and v <= Hl - 1):
            continue
        ix = min(int(u), max(Wl - 2, 0))
        iy = min(int(v), max(Hl - 2, 0))
        jx = min(ix + 1, Wl - 1)
        jy = min(iy + 1, Hl - 1)
        ax = u - ix
        ay = v - iy
        w00 = (1.0 - ax) * (1.0 - ay)
        w01 = ax * (1.0 - ay)
        w10 = (1.0 - ax) * ay
        w11 = ax * ay
        s = 0.0
        for c in range(C):
            f = w00 * F[iy, ix, c] + w01 * F[iy, jx, c] + w10 * F[jy, ix, c] + w11 * F[jy, jx, c]
            d = f - smean[k, c]
            s += weight[k, c] * d * d
        acc += s
        accv += svar_mean[k]
        joint += 1
    return acc, accv, joint


class VolumeCost:
    """Cost of a candidate pose against a fixed support volume.

    Equivalent to ``matching_cost(unproject_target(...), support_vol)`` but
    evaluated in a single fused pass over the support-valid voxels.
    """

    def __init__(
        self,
        target: FeaturePyramid,
        K: Intrinsics,
        support_vol: FeatureVolume,
        div: int,
        lam_var: float = 0.0,
        consistency: float | None = None,
        var_weight: float | None = None,
    ):
        self.raster = np.ascontiguousarray(target.level(div), dtype=np.float32)
        if self.raster.shape[2] != support_vol.channels:
            raise DimensionError("target level channels differ from the support volume")
        self.K = K
        self.div = float(div)
        self.lam_var = float(lam_var)
        self.n_total = support_vol.resolution ** 3
        keep = consistent_voxels(support_vol, consistency)
        self.consistency = consistency
        self.voxels = np.ascontiguousarray(support_vol.voxels()[keep])
        self.smean = np.ascontiguousarray(support_vol.mean[keep], dtype=np.float64)
        self.svar = np.ascontiguousarray(support_vol.var[keep].mean(axis=1), dtype=np.float64)
        self.weight = np.ascontiguousarray(variance_weights(support_vol.var[keep], var_weight))
        self.channels = support_vol.channels
        self.evaluations = 0

    def __call__(self, pose: Pose) -> float:
        self.evaluations += 1
        P = _projection(pose)
        h, w = self.raster.shape[:2]
        K = self.K
        acc, accv, joint = _fused_cost(
            self.raster, h, w, P, K.fx, K.fy, K.cx, K.cy, self.div,
            self.voxels, self.smean, self.weight, self.svar, self.lam_var,
        )
        # with a consistency subset the 5% floor applies to the kept voxels
        floor = self.n_total if self.consistency is None else len(self.voxels)
        if joint == 0 or joint < MIN_VALID_FRACTION * floor:
            return float("inf")
        cost = acc / (joint * self.channels)
        if self.lam_var:
            cost += self.lam_var * accv / joint
        return float(cost)


# ---------------------------------------------------------------------------
# CVOL dump: b"CVOL", u32 res, u32 channels, res^3*C float32 mean, then var,
# then the validity bitmap (np.packbits order, flat voxel index).

_MAGIC = b"CVOL"


def save_volume(vol: FeatureVolume, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", vol.resolution, vol.channels))
        fh.write(np.ascontiguousarray(vol.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(vol.var, dtype="<f4").tobytes())
        fh.write(np.packbits(vol.valid.astype(np.uint8)).tobytes())


def load_volume(path) -> FeatureVolume:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: missing CVOL header")
    res, C = struct.unpack_from("<II", data, 4)
    n = res ** 3
    nbits = (n + 7) // 8
    if len(data) != 12 + 8 * n * C + nbits:
        raise FormatError(f"{path}: payload size does not match header")
    off = 12
    mean = np.frombuffer(data, "<f4", n * C, off).reshape(n, C).astype(np.float64)
    off += 4 * n * C
    var = np.frombuffer(data, "<f4", n * C, off).reshape(n, C).astype(np.float64)
    off += 4 * n * C
    valid = np.unpackbits(np.frombuffer(data, np.uint8, nbits, off))[:n].astype(bool)
    count = valid.astype(np.int64)
    return FeatureVolume(res, C, mean, var, valid, count)
