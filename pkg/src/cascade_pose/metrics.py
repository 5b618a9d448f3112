"""Pose accuracy metrics: ADD, ADD-S, projection error, diameter, recall."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import Intrinsics, project_points
from .errors import EmptyModel, InvalidGT
from .pose import Pose

DIAMETER_EXACT_LIMIT = 5000


def _check_model(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyModel("model has no vertices")
    return pts


def add_metric(pts, p_est: Pose, p_gt: Pose) -> float:
    pts = _check_model(pts)
    d = p_est.transform_points(pts) - p_gt.transform_points(pts)
    return float(np.linalg.norm(d, axis=1).mean())


def adds_metric(pts, p_est: Pose, p_gt: Pose) -> float:
    """Mean distance from each estimated vertex to its nearest ground-truth vertex."""
    pts = _check_model(pts)
    est = p_est.transform_points(pts)
    gt = p_gt.transform_points(pts)
    dist, _ = cKDTree(gt).query(est, k=1)
    return float(dist.mean())


def adds_brute_force(pts, p_est: Pose, p_gt: Pose) -> float:
    pts = _check_model(pts)
    est = p_est.transform_points(pts)
    gt = p_gt.transform_points(pts)
    best = np.empty(len(est))
    for i in range(0, len(est), 256):
        d = np.linalg.norm(est[i : i + 256, None, :] - gt[None, :, :], axis=2)
        best[i : i + 256] = d.min(axis=1)
    return float(best.mean())


def proj_error(pts, K: Intrinsics, p_est: Pose, p_gt: Pose) -> float:
    """Mean pixel distance between projections under the two poses.

    Estimated points that fall behind the camera contribute the image diagonal.
    """
    pts = _check_model(pts)
    uv_gt, ok_gt = project_points(K, p_gt.transform_points(pts))
    if not ok_gt.all():
        raise InvalidGT("ground-truth pose puts model points behind the camera")
    uv_est, ok_est = project_points(K, p_est.transform_points(pts))
    cap = K.diagonal
    err = np.full(len(pts), cap)
    d = np.linalg.norm(uv_est[ok_est] - uv_gt[ok_est], axis=1)
    err[ok_est] = np.minimum(d, cap)
    return float(err.mean())


def diameter(pts) -> float:
    """Largest pairwise distance; exact up to 5000 points, otherwise on an FPS subsample."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise EmptyModel("diameter needs at least two points")
    if len(pts) > DIAMETER_EXACT_LIMIT:
        from .initializer import fps_select

        pts = pts[fps_select(pts, DIAMETER_EXACT_LIMIT)]
    return _max_pairwise(pts)


def _max_pairwise(pts: np.ndarray) -> float:
    best = 0.0
    for i in range(0, len(pts), 512):
        d2 = ((pts[i : i + 512, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def voxel_centers(res: int) -> np.ndarray:
    """Centres of a ``res^3`` grid over the unit cube at the origin, index order (i, j, k)."""
    c = (np.arange(res) + 0.5) / res - 0.5
    g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def pose_loss_diag(p_est_stages, p_gt: Pose, resolutions, weights=None) -> float:
    """Stage-weighted sum of voxel-centre displacement norms between estimated and true poses."""
    p_est_stages = list(p_est_stages)
    resolutions = list(resolutions)
    if len(p_est_stages) != len(resolutions):
        raise ValueError("one pose per stage required")
    if weights is None:
        weights = [1.0] * len(resolutions)
    total = 0.0
    for p, res, lam in zip(p_est_stages, resolutions, weights):
        v = voxel_centers(res)
        total += lam * float(np.linalg.norm(p.transform_points(v) - p_gt.transform_points(v), axis=1).sum())
    return total


def box_iou(a, b) -> float:
    """IoU of axis-aligned boxes ``(x0, y0, x1, y1)``."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union) if union > 0 else 0.0


# ---------------------------------------------------------------------------
# records and recall


@dataclass
class EvalRecord:
    object_id: str
    target_id: str
    add: float
    adds: float
    proj_err: float
    pass_add_0_1d: bool
    pass_prj5: bool
    rot_err_deg: float = float("nan")
    trans_err: float = float("nan")  # in object diameters

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_pose(
    pts, K: Intrinsics, p_est: Pose, p_gt: Pose, diameter_: float, symmetric: bool = False,
    object_id: str = "object", target_id: str = "",
) -> EvalRecord:
    from .pose import rotation_angle

    add = add_metric(pts, p_est, p_gt)
    adds = min(adds_metric(pts, p_est, p_gt), add)
    prj = proj_error(pts, K, p_est, p_gt)
    dist = adds if symmetric else add
    return EvalRecord(
        object_id,
        target_id,
        add,
        adds,
        prj,
        bool(dist < 0.1 * diameter_ * p_gt.s),
        bool(prj < 5.0),
        rotation_angle(p_est.q, p_gt.q),
        float(np.linalg.norm(p_est.t - p_gt.t) / (diameter_ * p_gt.s)),
    )


def recall(values, threshold: float) -> float:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.mean(values < threshold))


def summarize(records, diameter_: float, symmetric: bool = False) -> dict:
    records = list(records)
    n = len(records)
    if n == 0:
        return {"n": 0, "ADD-0.1d": 0.0, "ADDS-0.1d": 0.0, "Prj-5": 0.0}
    return {
        "n": n,
        "ADD-0.1d": recall([r.add for r in records], 0.1 * diameter_),
        "ADDS-0.1d": recall([r.adds for r in records], 0.1 * diameter_),
        "Prj-5": recall([r.proj_err for r in records], 5.0),
        "ADD(S)-0.1d": float(np.mean([r.pass_add_0_1d for r in records])),
        "median_proj_err": float(np.median([r.proj_err for r in records])),
        "median_rot_err_deg": float(np.median([r.rot_err_deg for r in records])),
    }


def records_to_csv(records) -> str:
    records = list(records)
    buf = io.StringIO()
    fields = list(EvalRecord.__dataclass_fields__)
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(r.to_dict())
    return buf.getvalue()
