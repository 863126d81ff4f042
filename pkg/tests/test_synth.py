import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parasource.synth import (NoiseSpec, add_noise, default_data_mode, gaussian_samples, make_data,
                              manufactured_source, measured_data, preset, smooth_data,
                              supports_exact_formula)


@pytest.mark.parametrize("exp", range(1, 7))
def test_preset_shapes_and_coefficient_bound(exp):
    level = 3
    spec, noise = preset(exp, level)
    dim = 3 if exp == 6 else 2
    assert spec.grid.dim == dim
    assert spec.grid.shape == (2**level + 1,) * dim
    assert spec.time.n_steps == 2**level
    assert spec.G.shape == (spec.time.n_steps + 1,) + spec.grid.shape
    assert spec.a_min == 1.0
    assert np.all(spec.a >= 1.0)
    assert noise == NoiseSpec()


@pytest.mark.parametrize("exp", range(1, 7))
def test_every_preset_reproduces_manufactured_source(exp):
    spec, _ = preset(exp, 3)
    assert supports_exact_formula(spec, spec.F_true)
    X = spec.grid.mesh
    t = spec.time.levels.reshape((-1,) + (1,) * spec.grid.dim)
    a = 1 + np.prod(np.stack(X), axis=0)
    expected = (a + spec.grid.dim * np.pi**2 * t) * np.prod(np.cos(np.pi * np.stack(X)), axis=0)
    assert np.allclose(spec.F_true * spec.G, expected, rtol=0, atol=1e-12)
    assert np.array_equal(manufactured_source(spec), expected)


def test_initial_guesses():
    x, y = preset(1, 3)[0].grid.mesh
    assert np.all(preset(1, 3)[0].F0 == 1.0)
    assert np.all(preset(2, 3)[0].F0 == 1.0)
    s3 = preset(3, 3)[0]
    assert np.allclose(s3.F0, s3.F_true + x**2 * y**2)
    assert np.all(preset(4, 3)[0].F0 == 0.9)
    s5 = preset(5, 3)[0]
    assert np.allclose(s5.F0, s5.F_true + x**2 * y**2)
    s6 = preset(6, 2)[0]
    X = s6.grid.mesh
    assert np.allclose(s6.F0, s6.F_true + (X[0] * X[1] * X[2]) ** 2 / 10)


def test_disc_source_is_piecewise_constant():
    F = preset(4, 4)[0].F_true
    assert set(np.unique(F)) == {0.5, 1.0}


@pytest.mark.parametrize("exp, level", [(0, 3), (7, 3), (1, 1), (1, 7), (6, 5)])
def test_preset_rejects(exp, level):
    with pytest.raises(ValueError):
        preset(exp, level)


def test_exact_formula_corner_value():
    spec, _ = preset(2, 3)
    assert default_data_mode(2) == "exact_formula"
    assert default_data_mode(1) == "computed"
    trace = make_data(spec, spec.F_true, "exact_formula")
    assert trace[-1, 0] == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        make_data(spec, spec.F_true * 2, "exact_formula")
    with pytest.raises(ValueError):
        make_data(spec, spec.F_true, "analytic")


def test_computed_zero_source_trace():
    spec, _ = preset(1, 3)
    assert not np.any(make_data(spec, np.zeros(spec.grid.shape)))


def test_computed_and_exact_data_agree_to_discretisation_error():
    spec, _ = preset(2, 5)
    diff = make_data(spec, spec.F_true) - make_data(spec, spec.F_true, "exact_formula")
    assert np.max(np.abs(diff)) < 5e-3


def test_zero_noise_is_identity():
    trace = np.random.default_rng(0).standard_normal((5, 9))
    out = add_noise(trace, NoiseSpec(0.0))
    assert np.array_equal(out, trace)
    assert out is not trace


def test_noise_is_seeded_and_scaled():
    trace = np.zeros((17, 33))
    a = add_noise(trace, NoiseSpec(3.0, seed=99))
    b = add_noise(trace, NoiseSpec(3.0, seed=99))
    c = add_noise(trace, NoiseSpec(3.0, seed=100))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.std(a) == pytest.approx(0.03, rel=0.05)


def test_noise_fill_order_is_x_fastest_then_time():
    trace = np.zeros((2, 3, 4))
    z = gaussian_samples(7, trace.size)
    noisy = add_noise(trace, NoiseSpec(100 * 0.5, seed=7))
    assert noisy[0, 1, 0] == pytest.approx(0.5 * z[1])
    assert noisy[0, 0, 1] == pytest.approx(0.5 * z[3])
    assert noisy[1, 0, 0] == pytest.approx(0.5 * z[12])


def test_box_muller_matches_reference_draws():
    u = np.random.Generator(np.random.PCG64(3)).random(4)
    z = gaussian_samples(3, 4)
    r = np.sqrt(-2 * np.log(1 - u[0]))
    assert z[0] == pytest.approx(r * np.cos(2 * np.pi * u[1]))
    assert z[1] == pytest.approx(r * np.sin(2 * np.pi * u[1]))
    assert gaussian_samples(3, 3).shape == (3,)


@settings(max_examples=20)
@given(st.integers(0, 2**63), st.integers(200, 2000))
def test_noise_mean_zero(seed, n):
    z = gaussian_samples(seed, n)
    assert abs(z.mean()) < 4 / np.sqrt(n)


def test_noise_spec_validation():
    for kwargs in ({"delta_percent": -1}, {"delta_percent": 100}, {"smooth_halfwidth": -1}, {"seed": -5}):
        with pytest.raises(ValueError):
            NoiseSpec(**kwargs)


def test_smoothing_identity_and_constants():
    trace = np.random.default_rng(1).standard_normal((6, 9))
    assert np.array_equal(smooth_data(trace, 0), trace)
    const = np.full((6, 9, 9), 4.2)
    for hw in (1, 2, 5):
        assert np.allclose(smooth_data(const, hw), 4.2)
    with pytest.raises(ValueError):
        smooth_data(trace, -1)


def test_smoothing_window_interior_value():
    trace = np.zeros((7, 9))
    trace[3, 4] = 1.0
    out = smooth_data(trace, 1)
    # separable 3x3 box average in (t, x)
    assert out[3, 4] == pytest.approx(1 / 9)
    assert out[2, 5] == pytest.approx(1 / 9)
    assert out[3, 6] == 0.0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4))
def test_smoothing_linear_and_bounded(seed, hw):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 8, 10))
    sa, sb = smooth_data(a, hw), smooth_data(b, hw)
    assert np.allclose(smooth_data(2 * a - 3 * b, hw), 2 * sa - 3 * sb)
    assert np.abs(sa).max() <= np.abs(a).max() + 1e-12


def test_measured_data_skips_smoothing_without_noise():
    spec, _ = preset(1, 3)
    clean = measured_data(spec, NoiseSpec(0.0))
    assert np.array_equal(clean["clean"], clean["smoothed"])
    noisy = measured_data(spec, NoiseSpec(1.0))
    assert not np.array_equal(noisy["noisy"], noisy["smoothed"])
