"""Similarity-transform poses with unit-quaternion rotations.

Conventions
-----------
* Quaternions are numpy arrays ``[w, x, y, z]`` kept in canonical sign
  (``w >= 0``), so ``q`` and ``-q`` normalize to the same array.
* A pose maps object coordinates to camera coordinates,
  ``x_cam = s * R(q) @ x_obj + t``. Object coordinates are normalized so the
  model sits inside the unit cube centred at the origin.
* ``compose(a, b)`` applies ``b`` first, then ``a``.
* A :class:`PoseResidual` holds 7 offsets: a rotation vector (radians, about
  the camera axes by default), a translation in object-diameter units and a
  log-scale offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidQuaternion

_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternion helpers


def normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < _EPS:
        raise InvalidQuaternion(f"cannot normalize quaternion {q.tolist()}")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; the result is normalized and canonical."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        k = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * k, (R[2, 1] - R[1, 2]) / k, (R[0, 2] - R[2, 0]) / k, (R[1, 0] - R[0, 1]) / k]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        k = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / k, 0.25 * k, (R[0, 1] + R[1, 0]) / k, (R[0, 2] + R[2, 0]) / k]
    elif R[1, 1] > R[2, 2]:
        k = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / k, (R[0, 1] + R[1, 0]) / k, 0.25 * k, (R[1, 2] + R[2, 1]) / k]
    else:
        k = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / k, (R[0, 2] + R[2, 0]) / k, (R[1, 2] + R[2, 1]) / k, 0.25 * k]
    return normalize(q)


def quat_from_rotvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(v))
    half = 0.5 * angle
    if angle < 1e-8:
        # sin(a/2)/a series
        k = 0.5 - angle * angle / 48.0
    else:
        k = math.sin(half) / angle
    return normalize(np.concatenate([[math.cos(half)], k * v]))


def quat_to_rotvec(q) -> np.ndarray:
    q = normalize(q)
    vec = q[1:]
    s = float(np.linalg.norm(vec))
    angle = 2.0 * math.atan2(s, q[0])
    if s < 1e-12:
        return 2.0 * vec / q[0]
    return angle * vec / s


def quat_from_axis_angle(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_from_rotvec(axis * math.radians(degrees))


def rotation_angle(qa, qb) -> float:
    """Geodesic angle between two rotations, in degrees within [0, 180]."""
    d = quat_multiply(np.asarray(qa, float), quat_conjugate(np.asarray(qb, float)))
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(d[1:])), abs(float(d[0]))))


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True, eq=False)
class Pose:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        q = normalize(self.q)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        s = float(self.s)
        if not (s > 0 and np.isfinite(s)):
            raise ValueError(f"pose scale must be positive, got {s}")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", s)
        R = quat_to_matrix(q)
        R.setflags(write=False)
        object.__setattr__(self, "_R", R)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t, s: float = 1.0) -> "Pose":
        return cls(matrix_to_quat(R), t, s)

    @property
    def R(self) -> np.ndarray:
        return self._R

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        si = 1.0 / self.s
        ti = -si * (self.R.T @ self.t)
        return Pose(qi, ti, si)

    def transform_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.s * pts @ self.R.T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera centre expressed in object coordinates."""
        return -(self.R.T @ self.t) / self.s

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous similarity matrix."""
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (
            math.radians(rotation_angle(self.q, other.q)) <= atol
            and np.allclose(self.t, other.t, atol=atol, rtol=0)
            and abs(self.s - other.s) <= atol
        )

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t], "s": self.s}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["q"], d["t"], d.get("s", 1.0))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}], s={self.s:.6g})"


def compose(a: Pose, b: Pose) -> Pose:
    """Similarity composition; the result applies ``b`` then ``a``."""
    q = quat_multiply(a.q, b.q)
    t = a.s * (a.R @ b.t) + a.t
    return Pose(q, t, a.s * b.s)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def transform_points(p: Pose, pts) -> np.ndarray:
    return p.transform_points(pts)


# ---------------------------------------------------------------------------
# residual parameterization

ROT = slice(0, 3)
TRANS = slice(3, 6)
LOGS = 6
N_DIMS = 7


@dataclass(frozen=True, eq=False)
class PoseResidual:
    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    logs: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rot", np.array(self.rot, dtype=np.float64).reshape(3))
        object.__setattr__(self, "trans", np.array(self.trans, dtype=np.float64).reshape(3))
        object.__setattr__(self, "logs", float(self.logs))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans, [self.logs]])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "PoseResidual":
        v = np.asarray(v, dtype=np.float64).reshape(N_DIMS)
        return cls(v[ROT], v[TRANS], v[LOGS])

    @classmethod
    def axis(cls, dim: int, offset: float) -> "PoseResidual":
        v = np.zeros(N_DIMS)
        v[dim] = offset
        return cls.from_vector(v)


def apply_residual(p: Pose, r: PoseResidual, diameter: float = 1.0, frame: str = "camera") -> Pose:
    """Perturb ``p`` by ``r``.

    The rotation turns the object about its own centre; ``frame`` selects
    whether the rotation-vector axes are camera axes or object axes.
    Translation offsets are multiplied by ``diameter``.
    """
    dq = quat_from_rotvec(r.rot)
    if frame == "camera":
        q = quat_multiply(dq, p.q)
    elif frame == "object":
        q = quat_multiply(p.q, dq)
    else:
        raise ValueError(f"unknown rotation frame {frame!r}")
    return Pose(q, p.t + diameter * r.trans, p.s * math.exp(r.logs))


def residual_between(p: Pose, g: Pose, diameter: float = 1.0, frame: str = "camera") -> PoseResidual:
    """Residual ``r`` with ``apply_residual(p, r) == g`` (rotation gap < 180 deg)."""
    if frame == "camera":
        dq = quat_multiply(g.q, quat_conjugate(p.q))
    elif frame == "object":
        dq = quat_multiply(quat_conjugate(p.q), g.q)
    else:
        raise ValueError(f"unknown rotation frame {frame!r}")
    return PoseResidual(quat_to_rotvec(dq), (g.t - p.t) / diameter, math.log(g.s / p.s))


def random_pose(rng: np.random.Generator, t_scale: float = 1.0, log_s_scale: float = 0.3) -> Pose:
    q = rng.normal(size=4)
    return Pose(q, rng.normal(size=3) * t_scale, math.exp(rng.normal() * log_s_scale))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), scale: float = 1.0) -> Pose:
    """Object-to-camera pose for a camera at ``eye`` (object frame) looking at ``target``.

    Camera axes follow the image convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(up, z))) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(z, -up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes in object frame
    t = -scale * R @ eye
    return Pose.from_matrix(R, t, scale)
