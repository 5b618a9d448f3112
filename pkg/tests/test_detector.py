import numpy as np
import pytest

from cascade_pose.dataset import SupportSet
from cascade_pose.detector import (
    DetectorConfig, NoTemplate, crop_resize, detect, ncc_map, object_window, refine_window,
    self_detection_oracle,
)
from cascade_pose.errors import NoTemplate as NoTemplateError
from cascade_pose.features import box_downsample, build_pyramid

from conftest import textured_image

DIV = DetectorConfig().level


def paste_half(img, offset, background=0.5):
    """``img`` shrunk by 2 and pasted with its top-left corner at ``offset`` on a background canvas."""
    h, w = img.shape[:2]
    small = crop_resize(img, ((w - 1) / 2, (h - 1) / 2), 1.0, w // 2, w)
    canvas = np.full_like(img, background)
    ox, oy = offset
    canvas[oy : oy + h // 2, ox : ox + w // 2] = small
    return canvas


def test_self_detection(small_ds):
    S = small_ds.supports
    for i in (0, 5, 11):
        det = detect(build_pyramid(S.views[i].image), S)
        uv, side = object_window(S, i)
        assert np.linalg.norm(det.center - uv) <= DIV
        assert det.scale == 1.0
        assert abs(det.window - side) < 0.2 * side


def test_paste_and_find(small_ds):
    S = small_ds.supports
    i = 3
    img = S.views[i].image
    uv, _ = object_window(S, i)
    offset = (70, 40)
    det = detect(build_pyramid(paste_half(img, offset)), S)
    expect = np.array(offset) + (uv + 0.5) / 2 - 0.5
    assert np.linalg.norm(det.center - expect) <= 2 * DIV
    scales = list(DetectorConfig().scales)
    assert abs(scales.index(det.scale) - scales.index(0.5)) <= 1


def test_constant_target(small_ds):
    det = detect(build_pyramid(np.full((256, 256, 3), 0.5)), small_ds.supports)
    assert det.score == 0.0
    assert det.peak == (0, 0)
    assert det.scale == min(DetectorConfig().scales)


def test_score_is_heatmap_max(small_ds):
    t = small_ds.targets[0]
    det = detect(build_pyramid(t.image), small_ds.supports)
    assert -1 <= det.score <= 1
    assert abs(det.heatmap.max() - det.score) < 1e-6
    assert abs(det.heatmap[det.peak] - det.score) < 1e-6
    assert det.scale in DetectorConfig().scales


def test_translation_covariance(small_ds):
    S = small_ds.supports
    img = S.views[7].image
    a = detect(build_pyramid(paste_half(img, (16, 24))), S)
    b = detect(build_pyramid(paste_half(img, (16 + 48, 24 + 32))), S)
    shift = (np.array(b.peak) - np.array(a.peak)) - np.array([32, 48]) / DIV
    assert np.all(np.abs(shift) <= 1)


def test_held_out_views(ds32):
    ok = 0
    for t in ds32.targets:
        det = detect(build_pyramid(t.image), ds32.supports)
        gt = self_detection_oracle(ds32.supports, t.K, t.gt)
        ok += np.linalg.norm(det.center - gt) < 0.05 * det.window
    assert ok >= len(ds32.targets) - 1


def test_no_template():
    from cascade_pose.synth import generate

    ds = generate(0, 4, 0)
    tiny = SupportSet(ds.supports.views, 0.01)
    with pytest.raises(NoTemplateError):
        detect(build_pyramid(ds.supports.views[0].image), tiny)
    assert NoTemplate is NoTemplateError


def test_crop_full_image_is_box_downsample(rng):
    img = textured_image(rng, 64, 64)
    out = crop_resize(img, (31.5, 31.5), 1.0, 32, 64)
    assert np.allclose(out, box_downsample(img, 2), atol=1e-12)


def test_crop_identity_idempotent(rng):
    img = textured_image(rng, 48, 48)
    c = (23.5, 23.5)
    once = crop_resize(img, c, 1.0, 48, 48)
    twice = crop_resize(once, c, 1.0, 48, 48)
    assert np.max(np.abs(once - img)) < 1e-6
    assert np.max(np.abs(twice - once)) < 1e-6


def test_crop_outside_is_zero(rng):
    img = textured_image(rng, 48, 48)
    assert np.all(crop_resize(img, (500, 500), 1.0, 16, 20) == 0)


def test_crop_scale_multiplies_window(rng):
    img = textured_image(rng, 64, 64)
    assert np.allclose(crop_resize(img, (31.5, 31.5), 2.0, 32, 32), crop_resize(img, (31.5, 31.5), 1.0, 32, 64))


def test_crop_min_size():
    with pytest.raises(ValueError):
        crop_resize(np.zeros((32, 32)), (16, 16), 1.0, 15, 10)


def test_ncc_map_matches_brute_force(rng):
    F = rng.normal(size=(9, 11, 3))
    T = rng.normal(size=(3, 4, 3))
    m = ncc_map(F, T)
    P = np.pad(F, ((1, 3), (1, 4), (0, 0)), mode="edge")
    Tc = T - T.mean(axis=(0, 1))
    for y in range(9):
        for x in range(11):
            win = P[y : y + 3, x : x + 4]
            win = win - win.mean(axis=(0, 1))  # each channel centred on its own
            ref = (win * Tc).sum() / np.sqrt((win * win).sum() * (Tc * Tc).sum())
            assert m[y, x] == pytest.approx(ref, abs=1e-9)


def test_ncc_map_constant_template():
    assert np.all(ncc_map(np.random.default_rng(0).normal(size=(6, 6, 2)), np.ones((2, 2, 2))) == 0)


def test_unknown_feature_mode(small_ds):
    with pytest.raises(ValueError):
        detect(build_pyramid(small_ds.targets[0].image), small_ds.supports, DetectorConfig(features="nope"))


def test_refine_window_self_match(small_ds):
    S = small_ds.supports
    for i in (0, 9, 14):
        img = S.views[i].image
        det = refine_window(img, detect(build_pyramid(img), S), S)
        _, side = object_window(S, i)
        assert abs(det.window / side - 1) < 0.005


def test_refine_window_recovers_zoom(small_ds):
    """Target zoomed by 1.1 about the object centre: refined window grows by ~10%."""
    S = small_ds.supports
    i = 4
    img = S.views[i].image
    uv, side = object_window(S, i)
    h, w = img.shape[:2]
    # sample a window 1/1.1 the image size around the object centre and blow it up
    zoom = crop_resize(img, uv, 1.0, w, w / 1.1)
    det = refine_window(zoom, detect(build_pyramid(zoom), S), S)
    assert abs(det.window / side - 1.1) < 0.02
