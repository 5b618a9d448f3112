"""Procedural textured objects, a z-buffered point-splat renderer and
synthetic dataset generation with exact ground truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .dataset import (
    Dataset,
    SupportSet,
    SupportView,
    Target,
    dump_json,
    quantize,
    write_points,
    write_pose,
    write_ppm,
)
from .errors import EmptyRender, InvalidCount
from .pose import Pose, compose, look_at, quat_from_axis_angle, rotation_angle

BACKGROUND = 0.5
MIN_POINTS = 500
TEXTURE_BANDS = ((0.2, 4, 3.0), (0.22, 6, 8.0), (0.18, 8, 18.0))  # (amplitude, terms, frequency)


@dataclass(frozen=True, eq=False)
class SynthObject:
    seed: int
    points: np.ndarray  # (N, 3) inside the unit cube
    colors: np.ndarray  # (N, 3) in [0, 1]
    diameter: float


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 256
    focal: float = 320.0
    distance: float = 2.5
    n_points: int = 40000
    splat: int = 2
    # 0 = generic object; towards 1 the shape and texture become symmetric
    # under a half turn about the object z axis
    symmetry: float = 0.0
    target_depth_jitter: float = 0.08
    target_offset_px: float = 16.0
    target_roll_deg: float = 25.0
    coverage_deg: float = 40.0

    def intrinsics(self) -> Intrinsics:
        c = self.image_size / 2.0
        return Intrinsics(self.focal, self.focal, c, c, self.image_size, self.image_size)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _random_field(rng, n_terms: int, freq: float):
    w = rng.normal(size=(n_terms, 3)) * freq
    phase = rng.uniform(0, 2 * math.pi, n_terms)
    amp = rng.normal(size=n_terms) / math.sqrt(n_terms)

    def f(p):
        return np.cos(p @ w.T + phase) @ amp

    return f


def _half_turn_z(p: np.ndarray) -> np.ndarray:
    return p * np.array([-1.0, -1.0, 1.0])


def make_object(seed: int, n_points: int = 40000, symmetry: float = 0.0) -> SynthObject:
    """Star-shaped blob with a multi-frequency procedural colour texture."""
    if n_points < MIN_POINTS:
        raise InvalidCount(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    rng = np.random.default_rng([seed, 7])
    dirs = fibonacci_sphere(n_points)
    shape = _random_field(rng, 6, 2.2)
    radius = 1.0 + 0.22 * _mix_symmetric(shape, dirs, symmetry)
    pts = dirs * radius[:, None]
    pts *= 0.45 / np.abs(pts).max()

    colors = np.empty((n_points, 3))
    for c in range(3):
        # one band per pyramid scale so every cascade stage sees texture
        val = 0.5
        for amp, n_terms, freq in TEXTURE_BANDS:
            val = val + amp * _mix_symmetric(_random_field(rng, n_terms, freq), pts, symmetry)
        colors[:, c] = val
    colors = np.clip(colors, 0.02, 0.98)

    from .metrics import diameter as model_diameter

    return SynthObject(seed, pts, colors, model_diameter(pts))


def _mix_symmetric(f, p: np.ndarray, symmetry: float) -> np.ndarray:
    v = f(p)
    if symmetry <= 0:
        return v
    sym = 0.5 * (v + f(_half_turn_z(p)))
    return symmetry * sym + (1.0 - symmetry) * v


def render_view(obj: SynthObject, pose: Pose, K: Intrinsics, size=None, splat: int = 2):
    """Render with square ``splat`` x ``splat`` point splats over a mid-gray background.

    Returns ``(image, mask)`` where ``mask`` marks object pixels.
    """
    w, h = size if size is not None else (K.width, K.height)
    X = pose.transform_points(obj.points)
    z = X[:, 2]
    front = z > 1e-6
    X, z, cols = X[front], z[front], obj.colors[front]
    u = K.fx * X[:, 0] / z + K.cx
    v = K.fy * X[:, 1] / z + K.cy
    base_u = np.floor(u - 0.5 * (splat - 1)).astype(np.int64)
    base_v = np.floor(v - 0.5 * (splat - 1)).astype(np.int64)
    us, vs, zs, idx = [], [], [], []
    ar = np.arange(len(z))
    for dy in range(splat):
        for dx in range(splat):
            us.append(base_u + dx)
            vs.append(base_v + dy)
            zs.append(z)
            idx.append(ar)
    us = np.concatenate(us)
    vs = np.concatenate(vs)
    zs = np.concatenate(zs)
    idx = np.concatenate(idx)
    ok = (us >= 0) & (us < w) & (vs >= 0) & (vs < h)
    if not ok.any():
        raise EmptyRender("object projects entirely outside the image")
    pix = vs[ok] * w + us[ok]
    zs = zs[ok]
    idx = idx[ok]
    order = np.lexsort((idx, zs, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    img = np.full((h * w, 3), BACKGROUND)
    mask = np.zeros(h * w, dtype=bool)
    img[pix[win]] = cols[idx[win]]
    mask[pix[win]] = True
    return img.reshape(h, w, 3), mask.reshape(h, w)


def support_poses(n: int, distance: float) -> list:
    return [look_at(d * distance) for d in fibonacci_sphere(n)]


def nearest_rotation_gap(pose: Pose, poses) -> float:
    return min(rotation_angle(pose.q, p.q) for p in poses)


def random_target_pose(rng: np.random.Generator, cfg: SynthConfig) -> Pose:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    base = look_at(d * cfg.distance)
    roll = rng.uniform(-cfg.target_roll_deg, cfg.target_roll_deg)
    rolled = compose(Pose(quat_from_axis_angle([0, 0, 1], roll), np.zeros(3)), base)
    depth = cfg.distance * (1.0 + rng.uniform(-cfg.target_depth_jitter, cfg.target_depth_jitter))
    du, dv = rng.uniform(-cfg.target_offset_px, cfg.target_offset_px, size=2)
    t = np.array([du * depth / cfg.focal, dv * depth / cfg.focal, depth])
    return Pose(rolled.q, t, 1.0)


def generate(seed: int, n_support: int, n_target: int, cfg: SynthConfig = SynthConfig(), obj=None) -> Dataset:
    """Build a synthetic dataset in memory (images already quantized to 8 bits)."""
    if n_support < 3:
        raise InvalidCount(f"n_support must be >= 3, got {n_support}")
    if obj is None:
        obj = make_object(seed, cfg.n_points, cfg.symmetry)
    K = cfg.intrinsics()
    sposes = support_poses(n_support, cfg.distance)
    views = []
    for i, p in enumerate(sposes):
        img, _ = render_view(obj, p, K, splat=cfg.splat)
        views.append(SupportView(quantize(img), p, K, f"{i:03d}"))
    supports = SupportSet(views, obj.diameter, False, (0.0, 0.0, 0.0))

    rng = np.random.default_rng([seed, 11])
    targets = []
    for j in range(n_target):
        for _ in range(1000):
            gt = random_target_pose(rng, cfg)
            if n_support < 16 or nearest_rotation_gap(gt, sposes) <= cfg.coverage_deg:
                break
        else:
            raise RuntimeError("could not place a target within the support coverage radius")
        img, _ = render_view(obj, gt, K, splat=cfg.splat)
        targets.append(Target(f"{j:03d}", quantize(img), K, gt))
    if n_support >= 16:
        assert all(nearest_rotation_gap(t.gt, sposes) <= cfg.coverage_deg for t in targets)
    meta = {
        "diameter": obj.diameter,
        "symmetric": False,
        "intrinsics": K.to_dict(),
        "object_center": [0.0, 0.0, 0.0],
        "model": "model.xyz",
        "seed": seed,
        "n_support": n_support,
        "n_target": n_target,
        "synth": asdict(cfg),
    }
    return Dataset(None, supports, targets, K, obj.points, meta)


def make_dataset(seed: int, n_support: int, n_target: int, cfg: SynthConfig = SynthConfig(), root=None) -> Dataset:
    """Generate and write a dataset directory under ``root``."""
    ds = generate(seed, n_support, n_target, cfg)
    root = Path(root)
    (root / "support").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    dump_json(root / "meta.json", ds.meta)
    write_points(root / "model.xyz", ds.model_points)
    for v in ds.supports.views:
        write_ppm(root / "support" / f"{v.id}.ppm", v.image)
        write_pose(root / "support" / f"{v.id}.pose.json", v.pose)
    for t in ds.targets:
        write_ppm(root / "target" / f"{t.id}.ppm", t.image)
        write_pose(root / "target" / f"{t.id}.pose.json", t.gt)
    ds.root = root
    return ds
