import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdnet import geometry as g
from hdnet.geometry import BinConfig, BinDistribution, CameraIntrinsics

DEFAULT_BINS = BinConfig(1.0, 8.0, 71)
CAM = CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0)


def test_camera_and_config_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, -1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        BinConfig(2.0, 1.0, 10)
    with pytest.raises(ValueError):
        BinConfig(1.0, 8.0, 1)
    assert BinConfig() == DEFAULT_BINS


def test_bin_distribution_validation():
    with pytest.raises(ValueError):
        BinDistribution(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        BinDistribution(np.array([1.5, -0.5]))
    assert BinDistribution(np.array([0.25, 0.75])).expected_index() == 0.75


def test_normalize_depth_examples():
    assert g.normalize_depth(3000.0, CAM) == 3.0
    assert g.normalize_depth(2000.0, CameraIntrinsics(1000.0, 4000.0, 0, 0)) == 1.0
    with pytest.raises(ValueError):
        g.normalize_depth(0.0, CAM)
    d = np.random.default_rng(0).uniform(100, 1e4, size=100)
    cam = CameraIntrinsics(1234.5, 987.6, 1, 2)
    np.testing.assert_allclose(g.denormalize_depth(g.normalize_depth(d, cam), cam), d, rtol=1e-15)


def test_bin_index_examples():
    assert g.bin_index(1.0, DEFAULT_BINS) == 0.0
    assert g.bin_index(8.0, DEFAULT_BINS) == 70.0
    assert g.bin_index(2.0, DEFAULT_BINS) == pytest.approx(70 / 3, rel=1e-14)
    with pytest.raises(ValueError):
        g.bin_index(0.0, DEFAULT_BINS)


def test_bin_index_clamps_and_counts():
    g.clamp_events.reset()
    assert g.bin_index(0.5, DEFAULT_BINS) == 0.0
    assert g.bin_index(9.0, DEFAULT_BINS) == 70.0
    assert g.clamp_events.count == 2


def test_encode_bins_examples():
    assert g.encode_bins(2.4, 5).weights.tolist() == [0, 0, 0.6, 0.4, 0]
    assert g.encode_bins(3.0, 5).weights.tolist() == [0, 0, 0, 1, 0]
    assert g.encode_bins(0.25, 4).weights.tolist() == [0.75, 0.25, 0, 0]
    assert g.encode_bins(4.0, 5).weights.tolist() == [0, 0, 0, 0, 1]
    for bad in (-0.1, 4.5):
        with pytest.raises(ValueError):
            g.encode_bins(bad, 5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 70.0, allow_nan=False))
def test_encode_bins_two_adjacent_and_expected_index(b):
    w = g.encode_bins(b, 71).weights
    nz = np.flatnonzero(w)
    assert len(nz) <= 2 and (len(nz) < 2 or nz[1] == nz[0] + 1)
    assert abs(w @ np.arange(71) - b) < 1e-9


def test_decode_depth_examples():
    one_hot = np.zeros(71)
    one_hot[35] = 1.0
    assert g.decode_depth(one_hot, DEFAULT_BINS, CAM) == pytest.approx(2000 * math.sqrt(2), rel=1e-12)
    one_hot = np.zeros(71)
    one_hot[70] = 1.0
    assert g.decode_depth(one_hot, DEFAULT_BINS, CAM) == pytest.approx(8000.0, rel=1e-14)
    assert g.decode_depth(np.full(71, 1 / 71), DEFAULT_BINS, CAM) == pytest.approx(2000 * math.sqrt(2), rel=1e-12)
    with pytest.raises(ValueError):
        g.decode_depth(np.full(5, 0.2), DEFAULT_BINS, CAM)
    with pytest.raises(ValueError):
        g.decode_depth(np.full(71, 0.5), DEFAULT_BINS, CAM)


def test_monotonicity():
    d = np.linspace(1.0, 8.0, 500)
    b = np.array([g.bin_index(x, DEFAULT_BINS) for x in d])
    assert np.all(np.diff(b) > 0)
    assert np.all(np.diff(g.bin_to_normalized_depth(b, DEFAULT_BINS)) > 0)


def test_codec_round_trip():
    rng = np.random.default_rng(7)
    cam = CameraIntrinsics(1.0, 1.0, 0, 0)
    for d_hat in rng.uniform(1.0, 8.0, size=2000):
        back = g.decode_depth(g.encode_bins(g.bin_index(d_hat, DEFAULT_BINS), 71), DEFAULT_BINS, cam)
        assert abs(back - d_hat) / d_hat < 1e-9


def test_focal_scaling_of_decoded_depth():
    rng = np.random.default_rng(3)
    w = rng.dirichlet(np.ones(71))
    cam = CameraIntrinsics(800.0, 600.0, 320.0, 240.0)
    d0 = g.decode_depth(w, DEFAULT_BINS, cam)
    for s in (0.5, 2.0, 4.0):
        both = CameraIntrinsics(cam.fx * s, cam.fy * s, cam.cx, cam.cy)
        one_axis = CameraIntrinsics(cam.fx * s * s, cam.fy, cam.cx, cam.cy)
        assert g.decode_depth(w, DEFAULT_BINS, both) == d0 * s
        assert g.decode_depth(w, DEFAULT_BINS, one_axis) == d0 * s


def test_back_project_examples():
    c = CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0)
    np.testing.assert_array_equal(g.back_project(500, 500, 5.0, c), [0, 0, 5])
    np.testing.assert_array_equal(g.back_project(1500, 500, 2000.0, c), [2000, 0, 2000])
    with pytest.raises(ValueError):
        g.back_project(0, 0, -1.0, c)
    with pytest.raises(ValueError):
        g.project(np.array([0.0, 0.0, 0.0]), c)


def test_project_back_project_inverse():
    rng = np.random.default_rng(11)
    cam = CameraIntrinsics(1100.0, 1050.0, 512.0, 384.0)
    uv = rng.uniform(-200, 1200, size=(1000, 2))
    d = rng.uniform(100, 20000, size=1000)
    pts = g.back_project(uv[:, 0], uv[:, 1], d, cam)
    assert pts.shape == (1000, 3)
    np.testing.assert_allclose(g.project(pts, cam), uv, rtol=1e-12, atol=1e-9)
