import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_pose.errors import DimensionError, FormatError, ImageTooSmall
from cascade_pose.features import (
    FeatureConfig, box_downsample, build_pyramid, level_coords, load_precomputed, ncc, raw_features,
    save_precomputed, unlift,
)

from conftest import textured_image


def test_level_shapes_and_channels():
    pyr = build_pyramid(np.zeros((64, 64, 3)))
    assert pyr.shape(4) == (16, 16, 16)
    assert pyr.shape(8) == (8, 8, 32)
    assert pyr.shape(16) == (4, 4, 64)
    assert pyr.divisors == (4, 8, 16)


def test_level_shapes_ceil():
    pyr = build_pyramid(np.zeros((50, 70, 3)))
    assert pyr.shape(16)[:2] == (4, 5)
    assert pyr.image_size == (70, 50)


def test_constant_image_has_zero_gradients():
    raw = raw_features(np.full((40, 40, 3), 0.6))
    assert np.all(raw[..., 3:] == 0)
    assert np.allclose(raw[..., :3], 0.6)


def test_deterministic(rng):
    img = textured_image(rng)
    a, b = build_pyramid(img), build_pyramid(img.copy())
    for d in a.divisors:
        assert a.level(d).tobytes() == b.level(d).tobytes()


def test_seed_changes_lift(rng):
    img = textured_image(rng)
    a = build_pyramid(img, FeatureConfig(seed=0)).level(8)
    b = build_pyramid(img, FeatureConfig(seed=1)).level(8)
    assert not np.allclose(a, b)


def test_too_small():
    with pytest.raises(ImageTooSmall):
        build_pyramid(np.zeros((31, 64, 3)))


def test_gray_input_accepted():
    g = np.random.default_rng(0).random((40, 40))
    assert np.allclose(build_pyramid(g).level(4), build_pyramid(np.repeat(g[..., None], 3, 2)).level(4))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_translation_equivariance_div4(k):
    img = np.zeros((96, 96, 3))
    img[40:43, 30:32] = [1.0, 0.5, 0.2]
    shifted = np.roll(img, (4 * k, 4 * k), axis=(0, 1))
    a = build_pyramid(img).level(4)
    b = build_pyramid(shifted).level(4)
    assert np.array_equal(np.roll(a, (k, k), axis=(0, 1)), b)


def test_box_downsample_means():
    r = np.arange(16, dtype=float).reshape(4, 4)
    assert np.allclose(box_downsample(r, 2), [[2.5, 4.5], [10.5, 12.5]])
    # partial tiles average only covered pixels
    assert np.allclose(box_downsample(np.ones((5, 5)), 4), 1.0)


def test_unlift_recovers_raw(rng):
    img = textured_image(rng)
    cfg = FeatureConfig()
    pyr = build_pyramid(img, cfg)
    raw8 = box_downsample(raw_features(img), 8)
    assert np.allclose(unlift(pyr.level(8), cfg, 8), raw8, atol=1e-5)
    with pytest.raises(DimensionError):
        unlift(np.zeros((2, 2, 4)), FeatureConfig(levels=((8, 4),)), 8)


def test_level_coords_pixel_centres():
    assert np.allclose(level_coords([[1.5, 1.5]], 4), [[0.0, 0.0]])
    assert np.allclose(level_coords([[5.5, -0.5]], 4), [[1.0, -0.5]])


def test_ncc_examples():
    assert ncc([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert ncc([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    assert ncc([1, 1, 1], [3, 1, 2]) == 0.0
    with pytest.raises(ValueError):
        ncc([1], [1])
    with pytest.raises(ValueError):
        ncc([1, 2], [1, 2, 3])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=200)
def test_ncc_bounded_and_affine_invariant(a, gain, bias):
    a = np.array(a)
    b = np.random.default_rng(len(a)).normal(size=len(a))
    v = ncc(a, b)
    assert -1 <= v <= 1
    if np.ptp(a) > 1e-6:
        assert ncc(a, a) == pytest.approx(1.0)
        assert ncc(a * gain + bias, b) == pytest.approx(v, abs=1e-6)


def _pyr(rng):
    return build_pyramid(textured_image(rng, 64, 48))


def test_precomputed_roundtrip(tmp_path, rng):
    pyr = _pyr(rng)
    path = tmp_path / "f.cfpx"
    save_precomputed(pyr, path)
    back = load_precomputed(path)
    assert back.image_size == (48, 64)
    for d in pyr.divisors:
        assert back.level(d).shape == pyr.level(d).shape
        assert np.array_equal(back.level(d), pyr.level(d))


def test_precomputed_header_dims(tmp_path):
    # header written by hand: 3 levels of a 32x16 image, 2 channels each
    path = tmp_path / "h.cfpx"
    with open(path, "wb") as fh:
        fh.write(b"CFPX" + struct.pack("<I", 3))
        for div in (4, 8, 16):
            w, h = 32 // div, 16 // div
            fh.write(struct.pack("<III", w, h, 2) + np.zeros(w * h * 2, "<f4").tobytes())
    pyr = load_precomputed(path)
    assert pyr.shape(4) == (4, 8, 2) and pyr.shape(16) == (1, 2, 2)


def test_precomputed_truncated(tmp_path, rng):
    path = tmp_path / "t.cfpx"
    save_precomputed(_pyr(rng), path)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(FormatError):
        load_precomputed(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_precomputed(path)


def test_precomputed_size_mismatch(tmp_path, rng):
    path = tmp_path / "m.cfpx"
    save_precomputed(_pyr(rng), path)
    with pytest.raises(DimensionError):
        load_precomputed(path, image_size=(64, 64))
    with pytest.raises(DimensionError):
        load_precomputed(path, divisors=(4, 8))
