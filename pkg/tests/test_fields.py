import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from convexint.bumps import Profile
from convexint.fields import (FieldError, MollifierSpec, NormReport, PeriodicField, TimeSeriesField,
                              divergence, evaluate, gradient, load_field, lp_norm, mollify_spacetime,
                              multiply, poisson_antidivergence, resample, save_field, sobolev_norm,
                              subtract_mean)


def cos1(n, d=3):
    return PeriodicField.from_function(lambda x: np.cos(2 * np.pi * x[0]), d, n)


def random_field(seed, n=16, d=3, comps=1, modes=3):
    rng = np.random.default_rng(seed)
    x = np.stack(np.meshgrid(*([np.arange(n) / n] * d), indexing="ij"))
    data = np.zeros((comps,) + (n,) * d)
    for c in range(comps):
        for _ in range(modes):
            k = rng.integers(-3, 4, size=d)
            phase = rng.uniform(0, 2 * np.pi)
            data[c] += rng.normal() * np.cos(2 * np.pi * np.tensordot(k, x, axes=1) + phase)
    return PeriodicField(data)


class TestConstruction:
    def test_rejects_mixed_axes(self):
        with pytest.raises(FieldError):
            PeriodicField(np.zeros((1, 8, 4, 8)))

    def test_rejects_non_power_of_two(self):
        with pytest.raises(FieldError):
            PeriodicField(np.zeros((1, 6, 6, 6)))

    def test_rejects_bad_component_count(self):
        with pytest.raises(FieldError):
            PeriodicField(np.zeros((2, 8, 8, 8)))

    def test_frame_count(self):
        f = TimeSeriesField.from_function(lambda t, x: t + 0 * x[0], 2, 8, 0.0, 1.0, 0.25, 0.125)
        assert f.n_frames == 1 + round((1.0 + 0.5) / 0.125)
        with pytest.raises(FieldError):
            TimeSeriesField(0.0, 1.0, 0.25, 0.125, f.frames[:-1])

    def test_index_of(self):
        f = TimeSeriesField.from_function(lambda t, x: t + 0 * x[0], 2, 8, 0.0, 1.0, 0.25, 0.125)
        assert f.index_of(0.5) == 6
        with pytest.raises(FieldError):
            f.index_of(0.51)


class TestNorms:
    def test_zero(self):
        z = PeriodicField.zeros(3, 8)
        for s in (1, 2, 3.5, np.inf):
            assert lp_norm(z, s) == 0.0

    def test_cosine_l2(self):
        assert lp_norm(cos1(16), 2) == pytest.approx(1 / np.sqrt(2), abs=1e-14)

    def test_cosine_sup(self):
        assert lp_norm(cos1(16), np.inf) == pytest.approx(1.0, abs=1e-14)

    def test_exponent_below_one(self):
        with pytest.raises(FieldError):
            lp_norm(cos1(8), 0.5)

    @pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 4.0])
    def test_constant_sobolev(self, p):
        c = PeriodicField(np.full((1, 8, 8, 8), -2.5))
        assert sobolev_norm(c, 1, p) == pytest.approx(2.5, abs=1e-13)

    def test_sine_w12(self):
        f = PeriodicField.from_function(lambda x: np.sin(2 * np.pi * x[0]), 3, 32)
        expected = 1 / np.sqrt(2) + 2 * np.pi / np.sqrt(2)
        assert sobolev_norm(f, 1, 2) == pytest.approx(expected, rel=1e-13)

    def test_band_limited_resolution_independent(self):
        vals = [sobolev_norm(PeriodicField.from_function(lambda x: np.sin(2 * np.pi * x[0]), 3, n), 1, 2)
                for n in (32, 64)]
        assert abs(vals[0] - vals[1]) <= 1e-12

    def test_norm_report_rejects_nan(self):
        rep = NormReport()
        rep.add("a", 1.0, at=0.5)
        with pytest.raises(FieldError):
            rep.add("b", float("nan"))
        assert '"a": 1.0' in rep.to_json()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.floats(1.0, 6.0))
    def test_lp_monotone_in_exponent(self, seed, s):
        # unit-volume torus: L^s norms increase with s
        f = random_field(seed, n=8)
        assert lp_norm(f, 1) <= lp_norm(f, s) + 1e-12
        assert lp_norm(f, s) <= lp_norm(f, np.inf) + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-3, 3))
    def test_homogeneity(self, seed, c):
        f = random_field(seed, n=8)
        assert lp_norm(f * c, 2) == pytest.approx(abs(c) * lp_norm(f, 2), rel=1e-12, abs=1e-14)


class TestSpectral:
    def test_poisson_single_mode(self):
        v = poisson_antidivergence(cos1(16))
        x = np.arange(16) / 16
        expected = np.sin(2 * np.pi * x)[:, None, None] / (2 * np.pi)
        assert np.max(np.abs(v.data[0] - expected)) < 1e-14
        assert np.max(np.abs(v.data[1:])) < 1e-14

    def test_poisson_zero(self):
        assert lp_norm(poisson_antidivergence(PeriodicField.zeros(3, 8)), np.inf) == 0.0

    def test_poisson_rejects_mean(self):
        with pytest.raises(FieldError):
            poisson_antidivergence(PeriodicField(np.ones((1, 8, 8, 8))))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_poisson_inverts_divergence(self, seed):
        g = subtract_mean(random_field(seed))
        v = poisson_antidivergence(g)
        assert lp_norm(divergence(v) - g, 2) <= 1e-12 * max(lp_norm(g, 2), 1.0)
        assert lp_norm(v, 2) <= lp_norm(g, 2) / (2 * np.pi) + 1e-14

    def test_gradient_is_curl_free_and_divergence_of_curl(self):
        f = random_field(3)
        g = gradient(f)
        assert g.components == 3
        # mixed partials commute
        d01 = gradient(g.scalar(0)).data[1]
        d10 = gradient(g.scalar(1)).data[0]
        assert np.max(np.abs(d01 - d10)) < 1e-10

    def test_resample_preserves_values(self):
        f = random_field(5, n=16)
        fine = resample(f, 32)
        assert np.max(np.abs(fine.data[:, ::2, ::2, ::2] - f.data)) < 1e-12

    def test_evaluate_off_grid(self):
        f = random_field(9, n=16)
        pts = np.random.default_rng(1).uniform(size=(5, 3))
        fine = resample(f, 64)
        idx = np.round(pts * 64).astype(int) % 64
        on_fine = evaluate(f, idx / 64)
        assert np.max(np.abs(on_fine[0] - fine.data[0][tuple(idx.T)])) < 1e-11

    def test_multiply_dealias_exact_for_low_modes(self):
        a, b = cos1(16), cos1(16)
        assert np.max(np.abs(multiply(a, b, dealias=True).data - multiply(a, b).data)) < 1e-13

    def test_divergence_free_flag(self):
        x = np.stack(np.meshgrid(*([np.arange(16) / 16] * 3), indexing="ij"))
        v = PeriodicField(np.stack([np.sin(2 * np.pi * x[1]), np.cos(2 * np.pi * x[2]), 0 * x[0]]))
        assert v.is_divergence_free()
        assert not PeriodicField(np.stack([np.sin(2 * np.pi * x[0]), 0 * x[0], 0 * x[0]])).is_divergence_free()


class TestMollifier:
    def series(self, func, n=32, dt=1 / 64):
        return TimeSeriesField.from_function(func, 3, n, 0.0, 0.25, 0.5, dt)

    def test_constant(self):
        s = self.series(lambda t, x: 0 * x[0] + 3.0, n=16)
        m = mollify_spacetime(s, 0.25)
        assert np.max(np.abs(np.asarray(m.frames) - 3.0)) < 1e-13

    def test_cosine_multiplier(self):
        ell = 0.25
        s = self.series(lambda t, x: np.cos(2 * np.pi * x[0]))
        m = mollify_spacetime(s, ell)
        f = m.frame(m.n_frames // 2)
        c = float(np.sum(f.data[0] * np.cos(2 * np.pi * np.arange(32) / 32)[:, None, None]) / (32**3 / 2))
        # continuous convolution of the bump with cos, by adaptive quadrature
        prof = Profile("exp")
        num = integrate.quad(lambda y: float(prof(abs(y) / ell)) * np.cos(2 * np.pi * y), -ell, ell)[0]
        den = integrate.quad(lambda y: float(prof(abs(y) / ell)), -ell, ell)[0]
        assert 0 < c <= 1
        assert c == pytest.approx(num / den, abs=1e-4)
        assert np.max(np.abs(f.data[0] - c * np.cos(2 * np.pi * np.arange(32) / 32)[:, None, None])) < 1e-12

    def test_contracts_l1(self):
        rng = np.random.default_rng(4)
        k = rng.integers(-2, 3, size=(4, 3))
        w = rng.uniform(1, 4, size=4)

        def func(t, x):
            return sum(np.cos(2 * np.pi * (np.tensordot(kk, x, axes=1) + ww * t)) for kk, ww in zip(k, w))

        s = self.series(func, n=16, dt=1 / 32)
        m = mollify_spacetime(s, 0.125)
        before, _ = s.sup_norm(lambda f: lp_norm(f, 1))
        after, _ = m.sup_norm(lambda f: lp_norm(f, 1))
        assert after <= before + 1e-12

    def test_under_resolved(self):
        s = self.series(lambda t, x: 0 * x[0], n=16)
        with pytest.raises(FieldError):
            mollify_spacetime(s, 0.05)

    def test_spec_profile(self):
        s = self.series(lambda t, x: np.cos(2 * np.pi * x[1]), n=16, dt=1 / 32)
        a = mollify_spacetime(s, 0.25, MollifierSpec(Profile("poly", 6)))
        assert a.pad == pytest.approx(0.5 - 7 / 32)


def test_save_load_roundtrip(tmp_path):
    f = random_field(11, n=8, comps=3)
    save_field(f, tmp_path / "f.bin", 0.375)
    g, tag = load_field(tmp_path / "f.bin")
    assert tag == 0.375
    assert np.array_equal(f.data, g.data)
