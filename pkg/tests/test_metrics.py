import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_pose.camera import Intrinsics
from cascade_pose.errors import EmptyModel, InvalidGT
from cascade_pose.metrics import (
    EvalRecord, add_metric, adds_brute_force, adds_metric, box_iou, diameter, evaluate_pose, pose_loss_diag,
    proj_error, recall, records_to_csv, summarize, voxel_centers,
)
from cascade_pose.pose import Pose, compose, quat_from_axis_angle, random_pose

K = Intrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)


def sphere(rng, n):
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def test_add_identity_and_translation(rng):
    pts = rng.normal(size=(100, 3))
    p = random_pose(rng)
    assert add_metric(pts, p, p) == 0.0
    q = Pose(p.q, p.t + [0.3, 0, 0], p.s)
    assert add_metric(pts, q, p) == pytest.approx(0.3, abs=1e-12)


def test_add_rotation_closed_form(rng):
    # a point at distance r from the rotation axis moves 2 sin(theta/2) r
    pts = sphere(rng, 2000)
    axis = np.array([0.0, 0.0, 1.0])
    theta = 17.0
    gt = Pose(t=(0, 0, 5.0))
    est = Pose(quat_from_axis_angle(axis, theta), (0, 0, 5.0))
    r_perp = np.linalg.norm(pts[:, :2], axis=1)
    expect = 2 * math.sin(math.radians(theta) / 2) * r_perp.mean()
    assert add_metric(pts, est, gt) == pytest.approx(expect, abs=1e-6)
    # ring in the plane normal to the axis: the mean radius form holds exactly
    ring = pts.copy()
    ring[:, 2] = 0
    ring /= np.linalg.norm(ring, axis=1, keepdims=True)
    assert add_metric(ring, est, gt) == pytest.approx(2 * math.sin(math.radians(theta) / 2), abs=1e-9)


def test_adds_symmetric_square():
    sq = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]], dtype=float)
    gt = Pose(t=(0, 0, 4.0))
    est = Pose(quat_from_axis_angle([0, 0, 1], 90.0), (0, 0, 4.0))
    assert adds_metric(sq, est, gt) == pytest.approx(0.0, abs=1e-9)
    assert add_metric(sq, est, gt) > 1.0
    assert adds_metric(sq, gt, gt) == 0.0


def test_adds_kdtree_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(20):
        pts = rng.normal(size=(500, 3))
        a, b = random_pose(rng), random_pose(rng)
        assert abs(adds_metric(pts, a, b) - adds_brute_force(pts, a, b)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_adds_le_add(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(60, 3))
    a, b = random_pose(rng), random_pose(rng)
    assert adds_metric(pts, a, b) <= add_metric(pts, a, b) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_left_composition_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(80, 3))
    a, b = random_pose(rng), random_pose(rng)
    g = Pose(random_pose(rng).q, rng.normal(size=3))  # rigid, unit scale
    assert add_metric(pts, compose(g, a), compose(g, b)) == pytest.approx(add_metric(pts, a, b), abs=1e-9)
    assert adds_metric(pts, compose(g, a), compose(g, b)) == pytest.approx(adds_metric(pts, a, b), abs=1e-9)


def test_empty_model():
    for f in (add_metric, adds_metric):
        with pytest.raises(EmptyModel):
            f(np.zeros((0, 3)), Pose(), Pose())


def test_proj_error_examples(rng):
    pts = rng.uniform(-0.5, 0.5, size=(50, 3))
    gt = Pose(t=(0, 0, 4.0))
    assert proj_error(pts, K, gt, gt) == 0.0
    # a pure lateral shift of a flat object at depth Z moves every pixel by f d / Z
    flat = pts.copy()
    flat[:, 2] = 0
    est = Pose(t=(0.2, 0, 4.0))
    assert proj_error(flat, K, est, gt) == pytest.approx(500 * 0.2 / 4.0, abs=1e-6)


def test_proj_error_behind_camera_cap(rng):
    pts = rng.uniform(-0.5, 0.5, size=(50, 3))
    gt = Pose(t=(0, 0, 4.0))
    behind = Pose(t=(0, 0, -4.0))
    assert proj_error(pts, K, behind, gt) == pytest.approx(math.hypot(640, 480))
    # half the model behind the camera: those points cost the cap
    straddle = Pose(t=(0, 0, 0.0))
    slab = np.array([[0, 0, 1.0], [0, 0, -1.0]])
    e = proj_error(slab, K, straddle, Pose(t=(0, 0, 4.0)))
    # the front point lands on the principal point in both poses, the back one costs the cap
    assert e == pytest.approx(800.0 / 2)
    with pytest.raises(InvalidGT):
        proj_error(pts, K, gt, behind)


def test_diameter():
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    assert diameter(cube) == pytest.approx(math.sqrt(3))
    assert diameter([[0, 0, 0], [7, 0, 0]]) == 7.0
    with pytest.raises(EmptyModel):
        diameter([[1, 2, 3]])


def test_diameter_subsampled():
    pts = sphere(np.random.default_rng(2), 10000) * 0.5
    from cascade_pose.metrics import _max_pairwise

    exact = _max_pairwise(pts)
    assert abs(diameter(pts) - exact) <= 0.01 * exact


def test_pose_loss_diag():
    gt = Pose(t=(0, 0, 3.0))
    assert pose_loss_diag([gt, gt], gt, [4, 8]) == 0.0
    d1 = np.array([0.1, 0.0, 0.0])
    d2 = np.array([0.0, 0.02, 0.05])
    p1 = Pose(t=gt.t + d1)
    p2 = Pose(t=gt.t + d2)
    assert pose_loss_diag([p1], gt, [4]) == pytest.approx(64 * 0.1)
    assert pose_loss_diag([p1, p2], gt, [4, 8], [1, 2]) == pytest.approx(64 * 0.1 + 2 * 512 * np.linalg.norm(d2))
    with pytest.raises(ValueError):
        pose_loss_diag([p1], gt, [4, 8])


def test_voxel_centers():
    v = voxel_centers(2)
    np.testing.assert_allclose(v[0], [-0.25, -0.25, -0.25])
    np.testing.assert_allclose(v[1], [-0.25, -0.25, 0.25])
    np.testing.assert_allclose(v[4], [0.25, -0.25, -0.25])


def test_box_iou():
    assert box_iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert box_iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)
    assert box_iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), max_size=30), st.floats(0, 10), st.floats(0, 10))
def test_recall_monotone(vals, a, b):
    lo, hi = sorted((a, b))
    assert recall(vals, lo) <= recall(vals, hi)


def test_recall_empty():
    assert recall([], 1.0) == 0.0


def test_evaluate_and_summary(rng):
    pts = rng.uniform(-0.5, 0.5, size=(200, 3))
    gt = Pose(t=(0, 0, 4.0))
    d = diameter(pts)
    good = evaluate_pose(pts, K, gt, gt, d, target_id="a")
    far = evaluate_pose(pts, K, Pose(t=(d, 0, 4.0)), gt, d, target_id="b")
    assert good.pass_add_0_1d and good.pass_prj5 and good.add == 0.0
    assert not far.pass_add_0_1d and far.trans_err == pytest.approx(1.0)
    s = summarize([good, far], d)
    assert s["n"] == 2 and s["ADD-0.1d"] == 0.5 and s["Prj-5"] == 0.5
    assert summarize([], d)["n"] == 0
    csv = records_to_csv([good, far]).splitlines()
    assert csv[0].split(",") == list(EvalRecord.__dataclass_fields__)
    assert len(csv) == 3
