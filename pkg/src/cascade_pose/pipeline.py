"""End-to-end estimation: detect, crop, score support views, initialize top-K, refine."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .camera import Intrinsics
from .dataset import SupportSet
from .detector import DetectionResult, DetectorConfig, detect, refine_window
from .errors import PoseError
from .features import FeatureConfig, build_pyramid
from .initializer import ScoreConfig, fps_select, score_views, target_crop, top_k_init
from .pose import Pose, rotation_angle
from .refiner import DEFAULT_BINS, DEFAULT_RANGE, RefineConfig, cascade_refine, make_stages

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    num_init: int = 3
    n_stages: int = 3
    bins: tuple = DEFAULT_BINS
    anneal_w: float = 0.5
    anneal_v: float = 0.5
    sweeps: int = 2
    base_range: tuple = DEFAULT_RANGE
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    scoring: ScoreConfig = field(default_factory=ScoreConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def stages(self) -> list:
        return make_stages(
            self.n_stages, self.bins, self.anneal_w, self.anneal_v, self.base_range,
            feature_cfg=self.features, sweeps=self.sweeps,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        """Build from a (possibly partial) nested dict; unknown keys raise ValueError."""
        nested = {"detector": DetectorConfig, "scoring": ScoreConfig, "features": FeatureConfig, "refine": RefineConfig}
        known = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            if k in nested:
                sub = nested[k]
                sub_known = {f.name for f in fields(sub)}
                bad = set(v) - sub_known
                if bad:
                    raise ValueError(f"unknown {k} keys: {sorted(bad)}")
                v = sub(**{kk: _tuplify(vv) for kk, vv in v.items()})
            kw[k] = _tuplify(v)
        return cls(**kw)


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


@dataclass
class Estimate:
    target_id: str
    status: str  # ok | failed
    pose: Pose | None = None
    detection: DetectionResult | None = None
    hypotheses: list = field(default_factory=list)
    refinement: object = None
    error: str = ""
    seconds: float = 0.0

    def to_dict(self, trace: bool = False) -> dict:
        d = {
            "target": self.target_id,
            "status": self.status,
            "pose": self.pose.to_dict() if self.pose is not None else None,
            "detection": self.detection.to_dict() if self.detection is not None else None,
            "hypotheses": [h.to_dict() for h in self.hypotheses],
            "error": self.error,
        }
        if self.refinement is not None:
            d["winner"] = self.refinement.winner
            d["evaluations"] = self.refinement.evaluations
            d["stage_poses"] = [p.to_dict() for p in self.refinement.stage_poses()]
            if trace:
                d["trace"] = [t.to_dict() for t in self.refinement.trace]
        return d


class Estimator:
    """Pose estimator bound to one support set."""

    def __init__(self, supports: SupportSet, cfg: EstimatorConfig = EstimatorConfig()):
        self.supports = supports
        self.cfg = cfg
        self.stages = cfg.stages()

    @classmethod
    def with_shots(cls, supports: SupportSet, shots: int | None, cfg: EstimatorConfig = EstimatorConfig()):
        """Keep ``shots`` supports chosen by farthest point sampling of the camera centres."""
        if shots is not None and shots < len(supports):
            supports = supports.subset(fps_select(supports.camera_centers(), shots))
        return cls(supports, cfg)

    def detect(self, image, pyr) -> DetectionResult:
        cfg = self.cfg
        det = detect(pyr, self.supports, cfg.detector, cfg.features)
        if cfg.detector.refine and det.score > 0:
            det = refine_window(image, det, self.supports, cfg.detector, cfg.features)
        return det

    def estimate(self, image, K: Intrinsics, target_id: str = "") -> Estimate:
        t0 = time.perf_counter()
        cfg = self.cfg
        est = Estimate(target_id, "failed")
        try:
            pyr = build_pyramid(image, cfg.features)
            est.detection = self.detect(image, pyr)
            crop = target_crop(image, est.detection, cfg.scoring.crop_size)
            scores = score_views(crop, self.supports, None, cfg.scoring, cfg.features, cfg.detector.margin)
            est.hypotheses = top_k_init(scores, cfg.num_init, est.detection, self.supports, K, cfg.detector.margin)
            est.refinement = cascade_refine(pyr, K, self.supports, est.hypotheses, self.stages, cfg.features, cfg.refine)
            est.pose = est.refinement.pose
            est.status = "ok"
        except PoseError as exc:
            est.error = f"{type(exc).__name__}: {exc}"
            log.warning("target %s failed: %s", target_id, est.error)
        est.seconds = time.perf_counter() - t0
        return est

    def initial_only(self, image, K: Intrinsics) -> list:
        """Top-K hypotheses without refinement."""
        cfg = self.cfg
        det = self.detect(image, build_pyramid(image, cfg.features))
        scores = score_views(target_crop(image, det, cfg.scoring.crop_size), self.supports, None, cfg.scoring,
                             cfg.features, cfg.detector.margin)
        return top_k_init(scores, cfg.num_init, det, self.supports, K, cfg.detector.margin)


def recovered(p_est: Pose | None, p_gt: Pose, diameter: float, max_deg: float = 5.0, max_trans: float = 0.05) -> bool:
    """Rotation error below ``max_deg`` and translation error below ``max_trans`` diameters."""
    if p_est is None:
        return False
    rot = rotation_angle(p_est.q, p_gt.q)
    trans = float(np.linalg.norm(p_est.t - p_gt.t)) / (diameter * p_gt.s)
    return rot < max_deg and trans < max_trans and math.isfinite(rot)
