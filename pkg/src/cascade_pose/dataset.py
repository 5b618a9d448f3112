"""Support sets, dataset directories and image/pose file I/O.

Dataset layout::

    root/meta.json                 {"diameter", "symmetric", "intrinsics", "object_center", "model", ...}
    root/model.xyz                 one "x y z" vertex per line (object coordinates)
    root/support/NNN.ppm           binary P6, 8-bit
    root/support/NNN.pose.json     {"q": [w, x, y, z], "t": [x, y, z], "s": s}
    root/target/NNN.ppm
    root/target/NNN.pose.json      ground truth, read only by the evaluator
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .errors import DatasetError, FormatError
from .features import FeatureConfig, FeaturePyramid, build_pyramid
from .pose import Pose


@dataclass(eq=False)
class SupportView:
    image: np.ndarray
    pose: Pose
    K: Intrinsics
    id: str = ""


class SupportSet:
    """Posed reference views of one object plus per-view feature caches."""

    def __init__(self, views, diameter: float, symmetric: bool = False, center=(0.0, 0.0, 0.0)):
        views = list(views)
        if not views:
            raise ValueError("a support set needs at least one view")
        if not diameter > 0:
            raise ValueError("object diameter must be positive")
        self.views = views
        self.diameter = float(diameter)
        self.symmetric = bool(symmetric)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        for v in views:
            if v.pose.transform_points(self.center[None])[0, 2] <= 0:
                raise ValueError(f"support view {v.id!r} places the object behind the camera")
        self._pyramids: dict = {}
        # derived per-view data (detector templates, scoring crops) keyed by the producer
        self.cache: dict = {}

    def __len__(self) -> int:
        return len(self.views)

    def subset(self, indices) -> "SupportSet":
        idx = [int(i) for i in indices]
        out = SupportSet([self.views[i] for i in idx], self.diameter, self.symmetric, self.center)
        remap = {old: new for new, old in enumerate(idx)}
        for (k, cfg), pyr in self._pyramids.items():
            if k in remap:
                out._pyramids[(remap[k], cfg)] = pyr
        return out

    def camera_centers(self) -> np.ndarray:
        return np.stack([v.pose.camera_center() for v in self.views])

    def pyramid(self, i: int, cfg: FeatureConfig) -> FeaturePyramid:
        key = (i, cfg)
        if key not in self._pyramids:
            self._pyramids[key] = build_pyramid(self.views[i].image, cfg)
        return self._pyramids[key]

    def object_depth(self, i: int) -> float:
        return float(self.views[i].pose.transform_points(self.center[None])[0, 2])


@dataclass(eq=False)
class Target:
    id: str
    image: np.ndarray
    K: Intrinsics
    gt: Pose | None = None


@dataclass(eq=False)
class Dataset:
    root: Path | None
    supports: SupportSet
    targets: list = field(default_factory=list)
    K: Intrinsics | None = None
    model_points: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# PPM


def write_ppm(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image into float64 ``(H, W, 3)`` in ``[0, 1]``."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    payload = data[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, matching what a PPM file stores."""
    return to_uint8(img).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# JSON


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_pose(path) -> Pose:
    try:
        return Pose.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed pose file ({exc})") from exc


def write_pose(path, pose: Pose) -> None:
    dump_json(path, pose.to_dict())


def write_points(path, pts: np.ndarray) -> None:
    lines = [f"{x!r} {y!r} {z!r}" for x, y, z in np.asarray(pts, dtype=np.float64).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


# ---------------------------------------------------------------------------
# dataset directories


def load_dataset(root, with_gt: bool = True) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing dataset file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        K = Intrinsics.from_dict(meta["intrinsics"])
        diameter = float(meta["diameter"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"{meta_path}: malformed meta ({exc})") from exc
    symmetric = bool(meta.get("symmetric", False))
    center = meta.get("object_center", [0.0, 0.0, 0.0])

    sup_dir = root / "support"
    if not sup_dir.is_dir():
        raise DatasetError(f"missing dataset directory: {sup_dir}")
    views = []
    for img_path in sorted(sup_dir.glob("*.ppm")):
        vid = img_path.stem
        pose_path = sup_dir / f"{vid}.pose.json"
        if not pose_path.is_file():
            raise DatasetError(f"missing support pose file: {pose_path}")
        views.append(SupportView(read_ppm(img_path), read_pose(pose_path), K, vid))
    if not views:
        raise DatasetError(f"no support views under {sup_dir}")
    supports = SupportSet(views, diameter, symmetric, center)

    targets = []
    tgt_dir = root / "target"
    if tgt_dir.is_dir():
        for img_path in sorted(tgt_dir.glob("*.ppm")):
            tid = img_path.stem
            pose_path = tgt_dir / f"{tid}.pose.json"
            gt = read_pose(pose_path) if with_gt and pose_path.is_file() else None
            targets.append(Target(tid, read_ppm(img_path), K, gt))

    model = None
    if "model" in meta and (root / meta["model"]).is_file():
        model = read_points(root / meta["model"])
    return Dataset(root, supports, targets, K, model, meta)


def read_ground_truth(root) -> tuple[dict, dict]:
    """Target ground-truth poses by id, plus meta (with model points under ``"points"``)."""
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing dataset file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    gts = {}
    for pose_path in sorted((root / "target").glob("*.pose.json")):
        gts[pose_path.name[: -len(".pose.json")]] = read_pose(pose_path)
    model_path = root / meta.get("model", "model.xyz")
    if not model_path.is_file():
        raise DatasetError(f"missing dataset file: {model_path}")
    meta = dict(meta)
    meta["points"] = read_points(model_path)
    return gts, meta
