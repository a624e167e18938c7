import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hflow.errors import ConfigError, DataError
from hflow.optics import (
    InterferogramStack,
    OpticalParams,
    fresnel_propagate,
    reconstruction_pitch,
    remove_frame_dc,
    render_hologram_stack,
)

DISTANCES = [1e-3, -1e-3, 5e-3, -5e-3, 33e-3, -33e-3]


def random_field(rng, shape=(64, 64)):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def energy(f):
    return float(np.sum(np.abs(f) ** 2))


@pytest.mark.parametrize("z", DISTANCES)
def test_energy_conserved(params, rng, z):
    f = random_field(rng)
    g = fresnel_propagate(f, params, z)
    assert abs(energy(g) / energy(f) - 1) < 1e-12


@pytest.mark.parametrize("z", DISTANCES)
def test_round_trip(params, rng, z):
    f = random_field(rng, (48, 80))
    back = fresnel_propagate(fresnel_propagate(f, params, z), params, -z)
    assert np.max(np.abs(back - f)) / np.max(np.abs(f)) < 1e-12


def test_zero_distance_is_a_copy(params, rng):
    f = random_field(rng)
    g = fresnel_propagate(f, params, 0.0)
    assert np.array_equal(g, f) and g is not f
    g[0, 0] = 0
    assert f[0, 0] != 0


def test_stack_matches_framewise(params, rng):
    stack = np.stack([random_field(rng, (32, 32)) for _ in range(3)])
    out = fresnel_propagate(stack, params, 5e-3)
    for k in range(3):
        assert np.allclose(out[k], fresnel_propagate(stack[k], params, 5e-3), rtol=0, atol=1e-12)


def test_single_precision_stays_single(params, rng):
    f = random_field(rng).astype(np.complex64)
    g = fresnel_propagate(f, params, 5e-3)
    assert g.dtype == np.complex64
    assert abs(energy(g) / energy(f) - 1) < 1e-5


def test_thread_count_does_not_change_result(params, rng):
    f = random_field(rng, (4, 64, 64)).astype(np.complex64)
    a = fresnel_propagate(f, params, 33e-3, workers=1)
    b = fresnel_propagate(f, params, 33e-3, workers=2)
    assert np.array_equal(a, b)


def test_far_field_of_point_is_uniform(params):
    # a centered point spreads into a pure phase chirp of constant modulus
    f = np.zeros((64, 64), complex)
    f[32, 32] = 1.0
    g = fresnel_propagate(f, params, 33e-3)
    assert np.allclose(np.abs(g), 1 / 64, rtol=1e-12)


def test_reconstruction_pitch():
    p = OpticalParams()
    assert reconstruction_pitch(512, p, 0.0) == p.pixel_pitch_m
    assert reconstruction_pitch(512, p, -0.1) == pytest.approx(852e-9 * 0.1 / (512 * 20e-6))


@pytest.mark.parametrize("bad", [np.zeros(32), np.zeros((8, 64)), np.zeros((64, 15))])
def test_rejects_small_or_flat_input(params, bad):
    with pytest.raises(DataError):
        fresnel_propagate(bad.astype(complex), params, 1e-3)


def test_rejects_nonfinite(params):
    f = np.ones((32, 32), complex)
    f[3, 4] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        fresnel_propagate(f, params, 1e-3)


@pytest.mark.parametrize("field,value", [("wavelength_m", 0.0), ("numerical_aperture", 1.2),
                                         ("frame_rate_hz", -1.0), ("pixel_pitch_m", float("nan")),
                                         ("propagation_distance_m", float("inf"))])
def test_params_validation(field, value):
    with pytest.raises(ConfigError):
        OpticalParams(**{field: value})


def test_interferogram_stack_checks():
    with pytest.raises(DataError):
        InterferogramStack(np.zeros((4, 4)))
    with pytest.raises(DataError):
        InterferogramStack(np.full((1, 4, 4), 70000))
    s = InterferogramStack(np.full((2, 3, 5), 7))
    assert s.frames.dtype == np.uint16 and (s.frame_count, s.height, s.width) == (2, 3, 5)


def test_render_removes_frame_mean():
    frames = np.random.default_rng(0).integers(100, 200, (3, 32, 32)).astype(np.uint16)
    holo = render_hologram_stack(InterferogramStack(frames), z=0.0)
    assert np.allclose(holo.frames.mean(axis=(1, 2)), 0, atol=1e-12)
    assert np.allclose(holo.frames, remove_frame_dc(frames))


@settings(max_examples=25, deadline=None)
@given(z_mm=st.floats(min_value=-50, max_value=50).filter(lambda v: abs(v) > 0.1),
       seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(z_mm, seed):
    p = OpticalParams()
    f = random_field(np.random.default_rng(seed), (32, 32))
    g = fresnel_propagate(f, p, z_mm * 1e-3)
    assert abs(energy(g) / energy(f) - 1) < 1e-10
    assert np.allclose(fresnel_propagate(g, p, -z_mm * 1e-3), f, atol=1e-10)
