"""Support-view selection and top-K pose initialization.

The target is cropped around the detected object at the detected size and
compared with square crops of every support view, each rotated in-plane over
an angle grid.  The best views become pose hypotheses: the support pose,
turned by the in-plane angle and re-aimed along the ray through the detected
centre, at the depth implied by the detected size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics, rotate_about
from .dataset import SupportSet
from .detector import DetectionResult, DetectorConfig, crop_resize, object_window
from .errors import InvalidCount
from .features import FeatureConfig, build_pyramid
from .pose import Pose, matrix_to_quat, quat_from_axis_angle, quat_to_matrix

log = logging.getLogger(__name__)

DEFAULT_ANGLES = tuple(float(a) for a in range(0, 360, 10))

__all__ = [
    "SupportSet",
    "PoseHypothesis",
    "ScoreConfig",
    "fps_select",
    "score_views",
    "top_k_init",
    "target_crop",
    "ray_alignment",
]


def fps_select(positions, k: int) -> list:
    """Greedy farthest point sampling seeded at index 0; ties go to the lowest index."""
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidCount(f"cannot select {k} of {n} points")
    chosen = [0]
    mind = np.linalg.norm(pts - pts[0], axis=1)
    mind[0] = -1.0
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))  # argmax returns the first maximum
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
        mind[chosen] = -1.0
    return chosen


@dataclass(frozen=True)
class ScoreConfig:
    crop_size: int = 128
    level: int = 8
    angles: tuple = DEFAULT_ANGLES


@dataclass(frozen=True)
class PoseHypothesis:
    pose: Pose
    view: int
    score: float
    angle: float = 0.0

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "view": self.view, "score": self.score, "angle": self.angle}


def _disc_mask(n: int) -> np.ndarray:
    c = (n - 1) / 2.0
    y, x = np.mgrid[0:n, 0:n]
    return (x - c) ** 2 + (y - c) ** 2 <= (n / 2.0) ** 2


def _crop_vector(crop: np.ndarray, cfg: ScoreConfig, feature_cfg: FeatureConfig) -> np.ndarray:
    """Zero-mean unit-norm feature vector of a crop inside its inscribed disc (0 if constant)."""
    f = build_pyramid(crop, feature_cfg).level(cfg.level).astype(np.float64)
    v = f[_disc_mask(f.shape[0])].ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.zeros_like(v)


def support_crop(supports: SupportSet, i: int, size: int = 128, margin: float = 1.4) -> np.ndarray:
    uv, side = object_window(supports, i, margin)
    return crop_resize(supports.views[i].image, uv, 1.0, size, side, antialias=True)


def target_crop(img, detection: DetectionResult, size: int = 128) -> np.ndarray:
    return crop_resize(img, detection.center, 1.0, size, detection.window, antialias=True)


def _support_bank(supports: SupportSet, cfg: ScoreConfig, feature_cfg: FeatureConfig, margin: float):
    """(views * angles, D) matrix of rotated support-crop vectors, cached on the support set."""
    key = ("score_bank", cfg, feature_cfg, margin)
    if key not in supports.cache:
        rows = []
        for i in range(len(supports)):
            crop = support_crop(supports, i, cfg.crop_size, margin)
            for a in cfg.angles:
                rows.append(_crop_vector(rotate_about(crop, a), cfg, feature_cfg))
        supports.cache[key] = np.stack(rows)
    return supports.cache[key]


def score_views(
    target_crop_img,
    supports: SupportSet,
    angles=None,
    cfg: ScoreConfig = ScoreConfig(),
    feature_cfg: FeatureConfig = FeatureConfig(),
    margin: float = DetectorConfig.margin,
) -> list:
    """``(view, angle, score)`` for every support view and in-plane angle, best first.

    Ties keep view order, then angle order.
    """
    if angles is not None:
        angles = tuple(float(a) for a in angles)
        if not angles:
            raise ValueError("need at least one in-plane angle")
        cfg = ScoreConfig(cfg.crop_size, cfg.level, angles)
    crop = np.asarray(target_crop_img, dtype=np.float64)
    if crop.shape[0] != cfg.crop_size:
        crop = crop_resize(crop, ((crop.shape[1] - 1) / 2, (crop.shape[0] - 1) / 2), 1.0, cfg.crop_size,
                           crop.shape[0], antialias=True)
    t = _crop_vector(crop, cfg, feature_cfg)
    scores = np.clip(_support_bank(supports, cfg, feature_cfg, margin) @ t, -1.0, 1.0)
    n_ang = len(cfg.angles)
    out = [(k // n_ang, cfg.angles[k % n_ang], float(scores[k])) for k in range(len(scores))]
    order = sorted(range(len(out)), key=lambda k: (-out[k][2], k))
    return [out[k] for k in order]


def ray_alignment(d) -> np.ndarray:
    """Rotation taking the unit direction ``d`` onto the optical axis by the shortest arc."""
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(d, z)
    s = np.linalg.norm(axis)
    c = float(d @ z)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    return quat_to_matrix(quat_from_axis_angle(axis / s, math.degrees(math.atan2(s, c))))


def hypothesis_pose(
    supports: SupportSet, i: int, angle: float, detection: DetectionResult, K: Intrinsics,
    margin: float = DetectorConfig.margin,
) -> Pose:
    """Pose of support ``i`` turned in-plane by ``angle`` and moved onto the detected box."""
    view = supports.views[i]
    c_i = view.pose.transform_points(supports.center[None])[0]
    _, side_i = object_window(supports, i, margin)
    # seen on-axis, rolled about the optical axis, then re-aimed along the target ray
    ray = np.linalg.solve(K.matrix, np.array([detection.center[0], detection.center[1], 1.0]))
    Rz = quat_to_matrix(quat_from_axis_angle([0.0, 0.0, 1.0], angle))
    R = ray_alignment(ray).T @ Rz @ ray_alignment(c_i) @ view.pose.R
    # similar triangles: apparent size scales with focal length over distance
    dist = float(np.linalg.norm(c_i)) * (K.fx / view.K.fx) * (side_i / detection.window)
    s = view.pose.s
    t = dist * ray / np.linalg.norm(ray) - s * R @ supports.center
    return Pose(matrix_to_quat(R), t, s)


def top_k_init(
    scores, K_hyp: int, detection: DetectionResult, supports: SupportSet, K: Intrinsics | None = None,
    margin: float = DetectorConfig.margin,
) -> list:
    """Hypotheses from the ``K_hyp`` best distinct views (fewer, with a warning, if there are fewer views)."""
    if K_hyp < 1:
        raise InvalidCount("K must be at least 1")
    best = {}
    for view, angle, sc in scores:  # already sorted best first
        if view not in best:
            best[view] = (angle, sc)
    if K_hyp > len(best):
        log.warning("requested %d hypotheses but only %d support views are scored", K_hyp, len(best))
    K = K or supports.views[0].K
    out = []
    for view, (angle, sc) in list(best.items())[:K_hyp]:
        out.append(PoseHypothesis(hypothesis_pose(supports, view, angle, detection, K, margin), view, sc, angle))
    return out
