"""Cascaded coarse-to-fine pose search over discrete residual bins.

Each stage builds a support feature volume at its own resolution, then runs a
coordinate search over the 7 residual dimensions (rotation vector, translation
in object diameters, log scale).  Along each dimension the candidate offsets
are the centres of ``bins`` equal intervals spanning ``[-range, +range]`` plus
an explicit zero ("keep current").  Between stages the range shrinks by the
annealing factor ``w``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .camera import Intrinsics
from .dataset import SupportSet
from .errors import EmptyVolume, InvalidBins, NoValidPose, RefinementFailed
from .features import FeatureConfig, FeaturePyramid
from .pose import N_DIMS, Pose, PoseResidual, apply_residual
from .volume import VolumeCost, build_support_volume, nearest_views

log = logging.getLogger(__name__)

# rotation (rad) x3, translation (diameters) x3, log-scale
DEFAULT_RANGE = (math.pi / 4,) * 3 + (0.25,) * 3 + (math.log(1.5),)
DEFAULT_BINS = (16, 8, 4)
DEFAULT_RESOLUTIONS = (16, 32, 64)
DEFAULT_LEVELS = (16, 8, 4)  # pyramid divisor feeding each stage


@dataclass(frozen=True)
class StageConfig:
    index: int
    bins: int
    range: tuple  # 7 half-widths; 0 freezes a dimension
    resolution: int
    div: int
    channels: int
    sweeps: int = 2

    @property
    def interval(self) -> np.ndarray:
        return 2.0 * np.asarray(self.range) / self.bins


def make_stages(
    n_stages: int = 3,
    bins: Sequence[int] | None = DEFAULT_BINS,
    anneal_w: float | Sequence[float] = 0.5,
    anneal_v: float | Sequence[float] = 0.5,
    base_range: Sequence[float] = DEFAULT_RANGE,
    resolutions: Sequence[int] = DEFAULT_RESOLUTIONS,
    levels: Sequence[int] = DEFAULT_LEVELS,
    feature_cfg: FeatureConfig = FeatureConfig(),
    sweeps: int = 2,
) -> list:
    """Stage configurations with ``range_t = range_0 * prod(w_0..w_{t-1})``.

    The bin interval is ``2 * range / bins``, so explicit ``bins`` fix it.  When
    ``bins`` is None the counts follow the interval annealing instead:
    ``bins_{t+1} = round(bins_t * w_t / v_t)`` starting from 16.
    """
    w = _per_stage(anneal_w, n_stages)
    v = _per_stage(anneal_v, n_stages)
    if bins is None:
        counts = [16]
        for t in range(n_stages - 1):
            counts.append(max(2, int(round(counts[-1] * w[t] / v[t]))))
        bins = counts
    if len(bins) < n_stages or len(resolutions) < n_stages or len(levels) < n_stages:
        raise ValueError(f"need per-stage bins, resolutions and levels for {n_stages} stages")
    stages = []
    rng = np.asarray(base_range, dtype=np.float64)
    if rng.shape != (N_DIMS,):
        raise ValueError("base_range must have 7 entries")
    for t in range(n_stages):
        stages.append(
            StageConfig(
                index=t,
                bins=int(bins[t]),
                range=tuple(float(x) for x in rng),
                resolution=int(resolutions[t]),
                div=int(levels[t]),
                channels=feature_cfg.channels(int(levels[t])),
                sweeps=sweeps,
            )
        )
        rng = rng * w[t]
    return stages


def _per_stage(x, n):
    if np.isscalar(x):
        return [float(x)] * n
    x = [float(a) for a in x]
    return x + [x[-1]] * (n - len(x))


def make_bin_grid(rng, bins: int):
    """Offsets for one dimension (scalar ``rng``) or a list of them (sequence ``rng``).

    Bin centres of ``bins`` equal intervals on ``[-rng, rng]``, with 0 appended
    when it is not already a centre; a zero range yields only ``[0]``.
    """
    if bins < 2:
        raise InvalidBins(f"need at least 2 bins, got {bins}")
    if not np.isscalar(rng):
        return [make_bin_grid(r, bins) for r in rng]
    rng = float(rng)
    if rng < 0:
        raise ValueError("range must be non-negative")
    if rng == 0:
        return np.array([0.0])
    step = 2.0 * rng / bins
    centres = -rng + step * (np.arange(bins) + 0.5)
    if bins % 2 == 1:
        centres[bins // 2] = 0.0
        return centres
    return np.sort(np.append(centres, 0.0))


@dataclass
class SearchResult:
    state: object
    cost: float
    start_cost: float = float("nan")
    moves: list = field(default_factory=list)  # per sweep: offsets chosen for each dim
    costs: list = field(default_factory=list)  # accepted cost after every dimension update
    evaluations: int = 0


def _pose_step(diameter: float, frame: str):
    def step(p: Pose, dim: int, offset: float) -> Pose:
        return apply_residual(p, PoseResidual.axis(dim, offset), diameter, frame)

    return step


def coordinate_search(
    cost: Callable, start, grid, sweeps: int = 2, step: Callable | None = None
) -> SearchResult:
    """Per-dimension argmin over grid offsets, ``sweeps`` passes over all dimensions.

    Ties prefer the smaller ``|offset|``, then the negative side, so a flat cost
    keeps the start.  The default ``step`` applies pose residuals.
    """
    step = step or _pose_step(1.0, "camera")
    state = start
    current = cost(start)
    evals = 1
    res = SearchResult(state, current, current)
    for _ in range(sweeps):
        chosen = []
        for dim, offsets in enumerate(grid):
            best = (current, 0.0, False, 0.0)
            best_state = state
            for o in offsets:
                if o == 0.0:
                    continue
                cand = step(state, dim, float(o))
                c = cost(cand)
                evals += 1
                key = (c, abs(o), o > 0, o)
                if key < best:
                    best = key
                    best_state = cand
            if best[3] != 0.0:
                state = best_state
                current = best[0]
            chosen.append(best[3])
            res.costs.append(current)
        res.moves.append(chosen)
    if not math.isfinite(current):
        raise NoValidPose("every evaluated pose has infinite cost")
    res.state = state
    res.cost = current
    res.evaluations = evals
    return res


def cascade_search(cost: Callable, start, stages, step: Callable | None = None):
    """Run :func:`coordinate_search` once per stage with that stage's grid.

    ``cost`` is one function shared by all stages or a list with one per stage.
    """
    state = start
    results = []
    for i, st in enumerate(stages):
        f = cost[i] if isinstance(cost, (list, tuple)) else cost
        r = coordinate_search(f, state, make_bin_grid(st.range, st.bins), st.sweeps, step)
        state = r.state
        results.append(r)
    return state, results


# ---------------------------------------------------------------------------
# pose cascade


@dataclass(frozen=True)
class RefineConfig:
    n_nearest: int = 6
    min_views: int = 2
    lam_var: float = 0.0
    frame: str = "camera"
    # keep the shell_layers * res^2 most photo-consistent support voxels
    # (roughly a surface shell a few voxels thick); None uses every valid voxel
    shell_layers: float | None = 4.0
    # variance-weighted L2: weights 1 / (var + var_weight * mean var); None is plain L2
    var_weight: float | None = None

    def consistency(self, res: int):
        return None if self.shell_layers is None else min(1.0, self.shell_layers / res)


@dataclass
class StageTrace:
    stage: int
    hypothesis: int
    start: Pose
    pose: Pose
    cost: float
    start_cost: float
    moves: list
    support_views: list
    evaluations: int

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "hypothesis": self.hypothesis,
            "start": self.start.to_dict(),
            "pose": self.pose.to_dict(),
            "cost": _num(self.cost),
            "start_cost": _num(self.start_cost),
            "moves": [[float(m) for m in sweep] for sweep in self.moves],
            "support_views": list(self.support_views),
            "evaluations": self.evaluations,
        }


@dataclass
class RefinementResult:
    pose: Pose
    trace: list
    winner: int
    evaluations: int

    def stage_poses(self) -> list:
        """Winning hypothesis' pose after each stage."""
        return [t.pose for t in self.trace if t.hypothesis == self.winner]

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "winner": self.winner,
            "evaluations": self.evaluations,
            "trace": [t.to_dict() for t in self.trace],
        }


def _num(x: float):
    return float(x) if math.isfinite(x) else None


def refine_stage(
    target: FeaturePyramid,
    K: Intrinsics,
    supports: SupportSet,
    start: Pose,
    stage: StageConfig,
    feature_cfg: FeatureConfig,
    cfg: RefineConfig,
    hypothesis: int = 0,
) -> StageTrace:
    subset = nearest_views(supports, start, cfg.n_nearest)
    vol = build_support_volume(supports, subset, stage.resolution, stage.div, feature_cfg, cfg.min_views)
    cost = VolumeCost(target, K, vol, stage.div, cfg.lam_var, cfg.consistency(stage.resolution), cfg.var_weight)
    step = _pose_step(supports.diameter * start.s, cfg.frame)
    r = coordinate_search(cost, start, make_bin_grid(stage.range, stage.bins), stage.sweeps, step)
    return StageTrace(
        stage.index, hypothesis, start, r.state, r.cost, r.start_cost, r.moves, subset, r.evaluations
    )


def cascade_refine(
    target: FeaturePyramid,
    K: Intrinsics,
    supports: SupportSet,
    hypotheses,
    stages,
    feature_cfg: FeatureConfig = FeatureConfig(),
    cfg: RefineConfig = RefineConfig(),
) -> RefinementResult:
    """Refine every hypothesis at stage 0, keep the cheapest, refine it through the later stages."""
    poses = [h.pose if hasattr(h, "pose") else h for h in hypotheses]
    if not poses:
        raise ValueError("need at least one hypothesis")
    stages = list(stages)
    trace = []
    best = None
    for hi, p in enumerate(poses):
        try:
            tr = refine_stage(target, K, supports, p, stages[0], feature_cfg, cfg, hi)
        except (NoValidPose, EmptyVolume) as exc:
            log.debug("hypothesis %d dropped at stage 0: %s", hi, exc)
            continue
        trace.append(tr)
        if best is None or tr.cost < best.cost:
            best = tr
    if best is None:
        raise RefinementFailed("no hypothesis produced a finite stage-0 cost")
    winner = best.hypothesis
    pose = best.pose
    for st in stages[1:]:
        try:
            tr = refine_stage(target, K, supports, pose, st, feature_cfg, cfg, winner)
        except (NoValidPose, EmptyVolume) as exc:
            log.debug("stage %d failed, keeping previous pose: %s", st.index, exc)
            break
        trace.append(tr)
        pose = tr.pose
    return RefinementResult(pose, trace, winner, sum(t.evaluations for t in trace))
