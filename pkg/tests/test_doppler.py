import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hflow.doppler import (
    BackgroundNeighborhood,
    SpectralWindowConfig,
    analyze_window,
    band_mask,
    differential_broadening,
    doppler_frequencies,
    estimate_background,
    pca_preview,
    power_doppler,
    signed_sqrt,
    spectral_moment2,
    stft_power_spectra,
    svd_clutter_filter,
    top_bin_fraction,
    velocity_from_broadening,
    window_starts,
)
from hflow.errors import ConfigError, DataError, NumericError
from hflow.optics import OpticalParams

FS = 33000.0


def orthogonal_window(rng, t=64, h=8, w=8, static_amp=100.0, dyn_amp=1.0):
    """Rank-1 static clutter plus dynamics orthogonal to it in space and time."""
    n = h * w
    u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    u /= np.linalg.norm(u)
    v = np.exp(2j * np.pi * rng.random()) * np.ones(t) / math.sqrt(t)
    static = static_amp * math.sqrt(n * t) * np.outer(u, v.conj())
    dyn = dyn_amp * (rng.standard_normal((n, t)) + 1j * rng.standard_normal((n, t)))
    dyn -= np.outer(u, u.conj() @ dyn)
    dyn -= np.outer(dyn @ v, v.conj())
    to_window = lambda c: c.T.reshape(t, h, w)
    return to_window(static), to_window(dyn)


def test_svd_residual_equals_dynamic_energy(rng):
    static, dyn = orthogonal_window(rng)
    out = svd_clutter_filter(static + dyn, 1)
    e_dyn = np.sum(np.abs(dyn) ** 2)
    assert abs(np.sum(np.abs(out) ** 2) / e_dyn - 1) < 1e-8
    assert np.allclose(out, dyn, atol=1e-8 * np.abs(static).max())


def test_svd_annihilates_static(rng):
    static, _ = orthogonal_window(rng)
    out = svd_clutter_filter(static, 1)
    rel_db = 10 * np.log10(np.sum(np.abs(out) ** 2) / np.sum(np.abs(static) ** 2))
    assert rel_db <= -90


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), ratio=st.floats(3.0, 1e3))
def test_svd_separation_property(seed, ratio):
    static, dyn = orthogonal_window(np.random.default_rng(seed), t=32, static_amp=ratio)
    out = svd_clutter_filter(static + dyn, 1)
    assert abs(np.sum(np.abs(out) ** 2) / np.sum(np.abs(dyn) ** 2) - 1) < 1e-6


def test_svd_remove_zero_and_errors(rng):
    x = rng.standard_normal((8, 4, 4)) + 0j
    y = svd_clutter_filter(x, 0)
    assert np.array_equal(x, y) and y is not x
    with pytest.raises(ConfigError):
        svd_clutter_filter(x, 8)
    with pytest.raises(DataError):
        svd_clutter_filter(x[:1], 0)


def test_svd_failure_is_numeric_error():
    from hflow.doppler import _leading_right_vectors

    with pytest.raises(NumericError, match="window 7"):
        _leading_right_vectors(np.full((4, 4), np.nan), 1, window_index=7)


def test_config_validation():
    with pytest.raises(ConfigError):
        SpectralWindowConfig(hop=0)
    with pytest.raises(ConfigError):
        SpectralWindowConfig(svd_remove=512)
    with pytest.raises(ConfigError):
        SpectralWindowConfig(band_low_hz=7000, band_high_hz=6000)
    with pytest.raises(ConfigError):
        SpectralWindowConfig(apodization="kaiser")
    with pytest.raises(ConfigError, match="band_high_hz"):
        SpectralWindowConfig(band_high_hz=17000).check_rate(FS)


def test_window_starts():
    cfg = SpectralWindowConfig()
    assert window_starts(511, cfg).size == 0
    assert list(window_starts(1024, cfg)) == [0, 256, 512]
    assert list(window_starts(1279, cfg)) == [0, 256, 512]


def test_frequencies_include_positive_nyquist():
    f = doppler_frequencies(512, FS)
    assert f.max() == FS / 2 and f.min() > -FS / 2
    assert np.count_nonzero(np.diff(np.sort(f)) <= 0) == 0


@pytest.mark.parametrize("apod", ["none", "hann"])
def test_tone_lands_in_its_bin_with_unit_power(apod):
    cfg = SpectralWindowConfig(apodization=apod)
    k = 150
    t = np.arange(512)
    x = np.exp(2j * np.pi * k * t / 512)[:, None]
    psd, freqs = stft_power_spectra(x, cfg, FS)
    assert np.argmax(psd[:, 0]) == k
    assert freqs[k] == pytest.approx(k * FS / 512)
    assert psd[:, 0].sum() == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("apod", ["none", "hann"])
def test_parseval(rng, apod):
    cfg = SpectralWindowConfig(apodization=apod)
    x = rng.standard_normal((512, 5)) + 1j * rng.standard_normal((512, 5))
    from hflow.doppler import apodization_window

    w2 = apodization_window(512, apod)[:, None] ** 2
    psd, _ = stft_power_spectra(x, cfg, FS)
    assert np.allclose(psd.sum(axis=0), np.sum(w2 * np.abs(x) ** 2, axis=0) / w2.sum(), rtol=1e-12)


def test_window_length_mismatch():
    with pytest.raises(DataError):
        stft_power_spectra(np.zeros((100, 2), complex), SpectralWindowConfig(), FS)


def test_flat_band_m2():
    cfg = SpectralWindowConfig()
    freqs = doppler_frequencies(512, FS)
    spectra = np.ones((512, 1))
    a, b = cfg.band_low_hz, cfg.band_high_hz
    expected = (a * a + a * b + b * b) / 3
    assert expected == pytest.approx(1.3575e8)
    assert spectral_moment2(spectra, freqs, cfg)[0] == pytest.approx(expected, rel=5e-3)


def test_white_noise_m2_through_the_window_chain(rng):
    cfg = SpectralWindowConfig(svd_remove=0)
    x = (rng.standard_normal((512, 32, 32)) + 1j * rng.standard_normal((512, 32, 32))).astype(np.complex64)
    maps = analyze_window(x, cfg, FS)
    assert np.mean(maps.m2) == pytest.approx(1.3575e8, rel=5e-3)


def test_moments_ignore_out_of_band_power():
    cfg = SpectralWindowConfig()
    freqs = doppler_frequencies(512, FS)
    spectra = np.zeros((512, 2))
    spectra[np.abs(freqs) < 6000, 0] = 5.0
    inband = np.flatnonzero(band_mask(freqs, cfg))[3]
    spectra[inband, 1] = 2.0
    m0 = power_doppler(spectra, freqs, cfg)
    m2 = spectral_moment2(spectra, freqs, cfg)
    assert m0[0] == 0 and np.isnan(m2[0])
    assert m0[1] == 2.0 and m2[1] == pytest.approx(freqs[inband] ** 2)


def test_band_counts_both_signs():
    cfg = SpectralWindowConfig()
    freqs = doppler_frequencies(512, FS)
    sel = band_mask(freqs, cfg)
    assert np.all(np.abs(freqs[sel]) >= 6000) and np.all(np.abs(freqs[sel]) <= 16500)
    # the upper edge sits on Nyquist, which exists only once
    assert np.count_nonzero(freqs[sel] > 0) == np.count_nonzero(freqs[sel] < 0) + 1
    assert freqs[sel].max() == FS / 2


def test_top_bin_fraction_flags_band_edge():
    cfg = SpectralWindowConfig()
    freqs = doppler_frequencies(512, FS)
    spectra = np.zeros((512, 2))
    spectra[band_mask(freqs, cfg), :] = 1.0
    top = np.abs(freqs) == np.abs(freqs[band_mask(freqs, cfg)]).max()
    spectra[top, 1] = 100.0
    frac = top_bin_fraction(spectra, freqs, cfg)
    n = np.count_nonzero(band_mask(freqs, cfg))
    assert frac[0] == pytest.approx(1 / n)
    assert frac[1] == pytest.approx(100 / (n - 1 + 100))


def test_analyze_window_threads_and_chunks_identical(rng):
    cfg = SpectralWindowConfig(window_len=64, hop=32, svd_remove=2)
    x = (rng.standard_normal((64, 20, 30)) + 1j * rng.standard_normal((64, 20, 30))).astype(np.complex64)
    a = analyze_window(x, cfg, FS, chunk_px=128, threads=1)
    b = analyze_window(x, cfg, FS, chunk_px=128, threads=3)
    assert np.array_equal(a.m0, b.m0) and np.array_equal(a.m2, b.m2, equal_nan=True)
    assert np.array_equal(a.top_fraction, b.top_fraction)


def test_background_matches_brute_force_median(rng):
    mask = np.zeros((40, 40), bool)
    mask[18:23, 5:35] = True
    mask[5:35, 30:33] = True
    m2 = rng.uniform(1e7, 5e7, mask.shape)
    inner, outer = 2, 6
    est = estimate_background(m2, mask, inner, outer)
    from scipy import ndimage

    dist_out = ndimage.distance_transform_edt(~mask)
    d_edge = ndimage.distance_transform_edt(mask)
    ring = (dist_out > inner) & (dist_out <= outer)
    yy, xx = np.indices(mask.shape)
    for y, x in zip(*np.nonzero(mask)):
        near = ring & (np.hypot(yy - y, xx - x) <= d_edge[y, x] + outer)
        assert est.background[y, x] == np.median(m2[near])
    assert np.all(np.isnan(est.background[~mask])) and est.fallback_count == 0


def test_background_fallback_when_ring_empty():
    mask = np.ones((20, 20), bool)
    mask[0, 0] = False
    m2 = np.full(mask.shape, 3.0)
    m2[0, 0] = 7.0
    est = BackgroundNeighborhood(mask, 3, 9).estimate(m2)
    assert est.fallback_count == mask.sum()
    assert np.all(est.background[mask] == 7.0)


def test_background_shape_mismatch():
    nb = BackgroundNeighborhood(np.eye(8, dtype=bool), 1, 3)
    with pytest.raises(DataError):
        nb.estimate(np.zeros((9, 8)))


def test_differential_broadening_signed():
    mask = np.array([[True, True, True, False]])
    m2 = np.array([[5e6, 1e6, np.nan, 9e6]])
    bg = np.array([[1e6, 5e6, 1e6, np.nan]])
    out = differential_broadening(m2, bg, mask, top_fraction=np.array([[0.0, 0.2, 0.0, 0.9]]))
    assert out.delta_f[0, 0] == pytest.approx(2000.0)
    assert out.delta_f[0, 1] == pytest.approx(-2000.0)
    assert out.delta_f[0, 2] == 0 and not out.valid[0, 2]
    assert out.delta_f[0, 3] == 0 and not out.valid[0, 3]
    assert list(out.saturation_flag[0]) == [False, True, False, False]


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e12, 1e12))
def test_signed_sqrt_inverts_signed_square(x):
    y = signed_sqrt(x)
    assert y * abs(y) == pytest.approx(x, rel=1e-12, abs=1e-300)


def test_velocity_unit_check():
    v = velocity_from_broadening(np.array(1000.0), OpticalParams()).v
    assert float(v) == pytest.approx(6.871e-3, rel=1e-3)


def test_pca_preview(rng):
    static = np.broadcast_to(rng.standard_normal((12, 12)), (16, 12, 12)).astype(complex)
    prev = pca_preview(static)
    assert prev.shape == (12, 12) and prev.max() < 1e-20 * np.sum(np.abs(static) ** 2)
    moving = static.copy()
    moving[:, 4, 4] += rng.standard_normal(16)
    assert np.argmax(pca_preview(moving)) == 4 * 12 + 4
    with pytest.raises(DataError):
        pca_preview(static[:15])
