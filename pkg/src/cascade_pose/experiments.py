"""Seeded synthetic experiments shared by the acceptance suite and scripts/."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .metrics import proj_error
from .pipeline import Estimator, EstimatorConfig
from .pose import rotation_angle
from .synth import SynthConfig, generate

POOL = 64  # support views rendered; shots are FPS-selected from these


def benchmark_dataset(seed: int = 0, n_target: int = 100, symmetry: float = 0.0, pool: int = POOL) -> Dataset:
    return generate(seed, pool, n_target, SynthConfig(symmetry=symmetry))


@dataclass
class TargetOutcome:
    id: str
    status: str
    rot_err: float  # degrees
    trans_err: float  # object diameters
    proj_err: float  # pixels
    stage_rot_err: list = field(default_factory=list)

    @property
    def recovered(self) -> bool:
        return self.rot_err < 5.0 and self.trans_err < 0.05


@dataclass
class RunResult:
    outcomes: list
    seconds: float
    shots: int

    @property
    def recovery_rate(self) -> float:
        return float(np.mean([o.recovered for o in self.outcomes]))

    @property
    def median_proj_err(self) -> float:
        return float(np.median([o.proj_err for o in self.outcomes]))

    @property
    def prj5(self) -> float:
        return float(np.mean([o.proj_err < 5.0 for o in self.outcomes]))

    def stagewise_nonincreasing(self, tol: float = 1e-9) -> float:
        """Fraction of targets whose rotation error never grows from one stage to the next."""
        ok = [all(b <= a + tol for a, b in zip(o.stage_rot_err, o.stage_rot_err[1:])) for o in self.outcomes]
        return float(np.mean(ok))

    def summary(self) -> dict:
        return {
            "shots": self.shots,
            "targets": len(self.outcomes),
            "recovery": self.recovery_rate,
            "median_rot_err": float(np.median([o.rot_err for o in self.outcomes])),
            "median_trans_err": float(np.median([o.trans_err for o in self.outcomes])),
            "median_proj_err": self.median_proj_err,
            "prj5": self.prj5,
            "seconds": self.seconds,
        }


def outcome(ds: Dataset, target, est) -> TargetOutcome:
    """Score one :class:`~cascade_pose.pipeline.Estimate` against the target's ground truth."""
    if est.pose is None:
        return TargetOutcome(target.id, est.status, 180.0, float("inf"), float("inf"))
    gt = target.gt
    return TargetOutcome(
        target.id, est.status,
        rotation_angle(est.pose.q, gt.q),
        float(np.linalg.norm(est.pose.t - gt.t)) / (ds.supports.diameter * gt.s),
        proj_error(ds.model_points, target.K, est.pose, gt),
        [rotation_angle(p.q, gt.q) for p in est.refinement.stage_poses()],
    )


def from_estimates(ds: Dataset, estimates, seconds: float, shots: int) -> RunResult:
    by_id = {t.id: t for t in ds.targets}
    return RunResult([outcome(ds, by_id[e.target_id], e) for e in estimates], seconds, shots)


def run(ds: Dataset, shots: int | None = 32, cfg: EstimatorConfig = EstimatorConfig()) -> RunResult:
    """Estimate every target of ``ds`` with ``shots`` FPS-selected supports and score against GT."""
    t0 = time.perf_counter()
    est = Estimator.with_shots(ds.supports, shots, cfg)
    estimates = [est.estimate(t.image, t.K, t.id) for t in ds.targets]
    return from_estimates(ds, estimates, time.perf_counter() - t0, len(est.supports))
