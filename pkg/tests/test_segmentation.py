import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hflow.errors import ConfigError, DataError
from hflow.segmentation import (
    SegmentationConfig,
    close_mask,
    flat_field_correct,
    frangi_vesselness,
    hessian_eigenvalues,
    label_by_size,
    segment,
    temporal_correlation_map,
    threshold_and_refine,
    vessel_mask_from,
)


def ridge_image(shape=(64, 64), angle_deg=0.0, sigma=2.0, offset=0.0):
    yy, xx = np.indices(shape, dtype=float)
    cy, cx = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    t = np.radians(angle_deg)
    d = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t) - offset
    return np.exp(-d**2 / (2 * sigma**2)), d


@pytest.mark.parametrize("value", [0.0, 1.0, 1234.5])
def test_frangi_zero_on_constant(value):
    v = frangi_vesselness(np.full((48, 48), value))
    assert np.all(v == 0)


@pytest.mark.parametrize("angle", [0, 30, 45, 90, 135])
def test_frangi_peaks_on_ridge_centerline(angle):
    img, d = ridge_image(angle_deg=angle, offset=0.3)
    v = frangi_vesselness(img, scales=(1, 2, 3))
    inner = np.zeros(img.shape, bool)
    inner[12:-12, 12:-12] = True
    # along every cross-section the maximum is within half a pixel of the centerline
    yy, xx = np.nonzero(inner & (np.abs(d) < 8))
    best = v[inner].max()
    peak = np.argwhere(inner & (v == best))[0]
    assert abs(d[tuple(peak)]) <= 0.75
    assert v.max() == pytest.approx(1.0)


def test_frangi_prefers_tubes_over_blobs():
    yy, xx = np.indices((64, 64), dtype=float)
    blob = np.exp(-((xx - 20) ** 2 + (yy - 32) ** 2) / 8.0)
    tube = np.exp(-((yy - 32) ** 2) / 8.0) * (xx > 36)
    v = frangi_vesselness(blob + tube, scales=(2.0,))
    assert v[32, 50] > 5 * v[32, 20]


def test_frangi_zero_along_dark_valley():
    img, d = ridge_image()
    v = frangi_vesselness(-img, scales=(2.0,))
    assert np.all(v[np.abs(d) < 1] == 0)


def test_frangi_input_checks():
    with pytest.raises(DataError):
        frangi_vesselness(np.zeros((3, 4, 5)))
    with pytest.raises(ConfigError):
        frangi_vesselness(np.zeros((8, 8)), scales=())


def test_hessian_eigen_order(rng):
    l1, l2 = hessian_eigenvalues(rng.standard_normal((32, 32)), 2.0)
    assert np.all(np.abs(l1) <= np.abs(l2))


def test_flat_field_removes_smooth_illumination():
    yy, xx = np.indices((96, 96), dtype=float)
    illum = 1 + 0.5 * xx / 95
    ridge, _ = ridge_image((96, 96))
    flat = flat_field_correct(illum * (1 + ridge), 8.0)
    raw = illum * (1 + ridge)
    before = raw[10:20, 76:86].mean() / raw[10:20, 10:20].mean() - 1
    after = flat[10:20, 76:86].mean() / flat[10:20, 10:20].mean() - 1
    assert abs(after) < 0.3 * abs(before)


def test_temporal_correlation_map():
    t = np.linspace(0, 1, 20)
    ref = np.sin(2 * np.pi * t)
    m0 = np.ones((20, 4, 4))
    m0[:, 0, :] += ref[:, None]
    m0[:, 1, 0] += 3 * ref
    m0[:, 1, 1] -= ref
    mask = np.zeros((4, 4), bool)
    mask[0] = True
    corr, dead = temporal_correlation_map(m0, mask)
    assert corr[1, 0] == pytest.approx(1.0) and corr[1, 1] == pytest.approx(-1.0)
    assert dead[3, 3] and corr[3, 3] == 0
    with pytest.raises(DataError, match="8 windows"):
        temporal_correlation_map(m0[:5], mask)
    with pytest.raises(DataError, match="empty"):
        temporal_correlation_map(m0, np.zeros((4, 4), bool))


def test_close_mask_keeps_border_pixels():
    m = np.zeros((10, 10), bool)
    m[0, :] = True
    m[5, 2:8] = True
    m[5, 4] = False
    closed = close_mask(m)
    assert closed[0].all() and closed[5, 2:8].all()


def test_label_by_size_orders_components():
    m = np.zeros((10, 20), bool)
    m[1, 1:3] = True
    m[5, 1:15] = True
    m[8, 1:6] = True
    labels, sizes = label_by_size(m)
    assert list(sizes) == [14, 5, 2]
    assert labels[5, 3] == 1 and labels[8, 3] == 2 and labels[1, 1] == 3


def _random_scene(seed):
    rng = np.random.default_rng(seed)
    from scipy import ndimage

    v = ndimage.gaussian_filter(rng.random((48, 48)), 2.0)
    v = (v - v.min()) / (v.max() - v.min())
    corr = ndimage.gaussian_filter(rng.uniform(-1, 1, (48, 48)), 2.0)
    return v, corr / np.abs(corr).max()


def _artery(v, corr, vt, at):
    try:
        return threshold_and_refine(v, corr, SegmentationConfig(vessel_threshold=vt, artery_threshold=at,
                                                                min_component_px=5))[0]
    except DataError:
        return np.zeros(v.shape, bool)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**16), t=st.lists(st.floats(0, 1), min_size=2, max_size=2),
       a=st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_threshold_monotonicity(seed, t, a):
    v, corr = _random_scene(seed)
    lo_t, hi_t = sorted(t)
    lo_a, hi_a = sorted(a)
    assert not np.any(vessel_mask_from(v, hi_t) & ~vessel_mask_from(v, lo_t))
    strict = _artery(v, corr, hi_t, hi_a)
    loose = _artery(v, corr, lo_t, lo_a)
    assert not np.any(strict & ~loose)


def test_empty_artery_mask_is_an_error():
    with pytest.raises(DataError, match="artery mask is empty"):
        threshold_and_refine(np.zeros((16, 16)), np.zeros((16, 16)), SegmentationConfig())


def test_exclusion_radius():
    v = np.zeros((40, 40))
    v[20, :] = 1.0
    v[19:22, :] = 1.0
    cfg = SegmentationConfig(exclusion_center_px=(20, 20), exclusion_radius_px=10, min_component_px=1)
    mask, _ = threshold_and_refine(v, np.ones_like(v), cfg)
    assert mask[20, 20] and not mask[20, 2] and not mask[20, 35]


@pytest.mark.parametrize("kw", [dict(vessel_threshold=1.5), dict(artery_threshold=-2), dict(connectivity=6),
                                dict(frangi_scales_px=()), dict(frangi_c=0.0), dict(min_component_px=0),
                                dict(exclusion_radius_px=3.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SegmentationConfig(**kw)


def test_segment_keeps_pulsatile_vessel_and_drops_anticorrelated_one():
    rng = np.random.default_rng(3)
    n = 16
    pulse = 1 + 0.5 * np.sin(2 * np.pi * np.arange(n) / n)
    yy, xx = np.indices((64, 64))
    art = np.abs(yy - 20) <= 2
    vein = np.abs(yy - 44) <= 2
    m0 = np.ones((n, 64, 64)) + 0.01 * rng.standard_normal((n, 64, 64))
    m0[:, art] += 2 * pulse[:, None]
    m0[:, vein] += 2 * (1.2 - 0.2 * pulse)[:, None]
    seg = segment(m0, SegmentationConfig(vessel_threshold=0.2, artery_threshold=0.5))
    assert seg.artery_mask[20, 10:54].all()
    assert not seg.artery_mask[44].any()
    assert seg.vessel_mask[44, 10:54].all()
    assert seg.components.max() == 1
