import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexint.blocks import ParamError, SchemeParams
from convexint.fields import (FieldError, PeriodicField, TimeSeriesField, divergence, lp_norm,
                              space_multiplier)
from convexint.bumps import Profile
from convexint.geometry import make_xi_basis
from convexint.perturb import (GateError, PerturbationStep, PhiProfile, StepConfig, StepError, Triple,
                               admissibility_check, assemble_new_error, coarsen, cos_lq_norm,
                               decompose_error, initial_triple, iterate, perturbation_step,
                               principal_perturbations, shear_triple, space_corrector, time_corrector)

BASIS = make_xi_basis(3, 4)


def series_of(arr, t0=0.0, t1=0.8, pad=0.45, dt=1 / 256):
    nt = 1 + int(round((t1 - t0 + 2 * pad) / dt))
    return TimeSeriesField(t0, t1, pad, dt, np.broadcast_to(arr, (nt,) + arr.shape))


def resting_triple(n=32, amp=0.1, beta=0.1, **window):
    """rho(x1), b = (0, b2(x1), 0), R = 0: a stationary exact solution."""
    x1 = np.arange(n) / n
    rho = (0.3 + amp * np.cos(2 * np.pi * x1)).reshape(1, n, 1, 1) * np.ones((1, n, n, n))
    b = np.zeros((3, n, n, n))
    b[1] = beta * np.sin(2 * np.pi * x1).reshape(n, 1, 1)
    return Triple(series_of(rho, **window), series_of(b, **window), series_of(np.zeros((3, n, n, n)), **window),
                  eta=0.0)


SMALL = SchemeParams(eta=1.05, rbar=0.26, lam=4, ell=0.07, sigma=16.0)


def small_config(**kw):
    base = dict(dt_out=1 / 4096, dt_sub=1 / 4096, anchors=[[0.1, 0.2, 0.3]], samples=2)
    base.update(kw)
    return StepConfig(**base)


# ---------------------------------------------------------------- decomposition


class TestDecomposition:
    def field(self, vec):
        return series_of(np.broadcast_to(np.asarray(vec, float).reshape(3, 1, 1, 1), (3, 8, 8, 8)).copy(),
                         t1=0.1, pad=0.0, dt=0.05)

    def test_positive_direction(self):
        dec = decompose_error(self.field(0.7 * BASIS.xis[0]), BASIS)
        for j in range(6):
            expected = 0.7 if j == 0 else 0.0
            assert np.allclose(np.asarray(dec.coefficients[j].frames[1]), expected, atol=1e-14)

    def test_sign_split(self):
        dec = decompose_error(self.field(-0.7 * BASIS.xis[0]), BASIS)
        assert np.allclose(np.asarray(dec.coefficients[3].frames[0]), 0.7, atol=1e-14)
        assert dec.active() == [3]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        R = series_of(rng.normal(size=(3, 8, 8, 8)), t1=0.1, pad=0.0, dt=0.05)
        dec = decompose_error(R, BASIS)
        assert dec.reconstruction_error(R, 0) <= 1e-10
        coefs = np.stack([np.asarray(c.frames[0])[0] for c in dec.coefficients])
        assert coefs.min() >= 0
        # at most d of the 2d coefficients are nonzero at any point
        assert np.max(np.sum(coefs > 0, axis=0)) <= 3

    def test_ill_conditioned(self):
        with pytest.raises(StepError):
            decompose_error(self.field([1, 0, 0]), make_xi_basis(3, 2))


# ---------------------------------------------------------------- data


class TestInitialTriple:
    def test_cos_norm(self):
        assert cos_lq_norm(2) == pytest.approx(1 / np.sqrt(2), rel=1e-14)
        assert cos_lq_norm(1) == pytest.approx(2 / np.pi, rel=1e-14)

    def test_constant_profile(self):
        tri = initial_triple(PhiProfile((0.0, 1.0), (0.3, 0.3)), 2, 8, 0.0, 1.0, 0.1, 0.05)
        assert tri.eta == 0.0
        assert lp_norm(tri.R.frame(5), np.inf) == 0.0

    def test_normalization(self):
        phi = PhiProfile((0.0, 1.0), (0.25, 0.4))
        tri = initial_triple(phi, 8, 32, 0.0, 1.0, 0.1, 0.05)
        for i in (2, 10, 20):
            t = tri.rho.times[i]
            assert lp_norm(tri.rho.frame(i), 2) == pytest.approx(0.25 + 0.15 * t, rel=1e-13)

    def test_eta_halves(self):
        phi = PhiProfile((0.0, 0.5, 1.0), (0.1, 0.4, 0.2))
        a = initial_triple(phi, 2, 16, 0.0, 1.0, 0.1, 0.01)
        b = initial_triple(phi, 4, 16, 0.0, 1.0, 0.1, 0.01)
        assert b.eta * 2 == pytest.approx(a.eta, rel=1e-10)
        # measured on the grid as well, with the same number of points per period
        c = initial_triple(phi, 4, 32, 0.0, 1.0, 0.1, 0.01)
        assert c.measured_eta() * 2 == pytest.approx(a.measured_eta(), rel=1e-10)

    def test_rejects_large_profile(self):
        with pytest.raises(ParamError):
            initial_triple(PhiProfile((0.0, 1.0), (0.3, 0.6)), 1, 8, 0.0, 1.0, 0.0, 0.1)
        with pytest.raises(ParamError):
            initial_triple(PhiProfile((0.0, 1.0), (0.3, 0.4)), 0, 8, 0.0, 1.0, 0.0, 0.1)

    def test_continuity_defect(self):
        phi = PhiProfile((0.0, 0.5, 1.0), (0.1, 0.4, 0.2))
        res = []
        for dt in (1 / 64, 1 / 128):
            tri = initial_triple(phi, 2, 16, 0.0, 1.0, 0.1, dt)
            res.append(tri.cde_residual(samples=9)[0])
        # exact in space, second order in time
        assert res[1] < res[0] / 3.5
        assert res[1] < 1e-3

    def test_admissible_for_large_k(self):
        phi = PhiProfile((0.0, 1.0), (0.2, 0.45))
        tri = initial_triple(phi, 16, 64, 0.0, 1.0, 0.05, 0.025)
        rep = admissibility_check(tri, 0.25, 2.0, 1.0, tri.eta, samples=5)
        assert rep.passed, rep.as_dict()


class TestAdmissibility:
    def test_zero_triple_reports_infeasible_size(self):
        z = np.zeros((1, 8, 8, 8))
        zv = np.zeros((3, 8, 8, 8))
        tri = Triple(series_of(z, t1=0.2, pad=0.1, dt=0.05), series_of(zv, t1=0.2, pad=0.1, dt=0.05),
                     series_of(zv, t1=0.2, pad=0.1, dt=0.05))
        rep = admissibility_check(tri, 0.25, 2.0, 0.2, 0.1)
        cond = {c.name: c for c in rep.conditions}
        assert cond["error"].passed and cond["derivatives"].passed
        assert not cond["size"].passed
        assert cond["size"].margin == pytest.approx(1 - 2 * 0.1**0.25 - 0.0)
        assert not rep.passed

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.1, 10.0))
    def test_homogeneity(self, c):
        tri = shear_triple(8, BASIS, 0.0, 0.1, 0.0, 0.05)
        scaled = Triple(tri.rho, tri.b, TimeSeriesField(0.0, 0.1, 0.0, 0.05, np.asarray(tri.R.frames) * c))
        assert scaled.measured_eta() == pytest.approx(c * tri.measured_eta(), rel=1e-13)


class TestShear:
    def test_exact_solution(self):
        tri = shear_triple(16, BASIS, 0.0, 0.5, 0.1, 1 / 256)
        worst, scale = tri.cde_residual(samples=5)
        assert worst <= 1e-3 * scale
        assert tri.check_divergence_free() < 1e-12
        assert tri.measured_eta() <= tri.eta * (1 + 1e-12)

    def test_rejects_direction(self):
        with pytest.raises(ParamError):
            shear_triple(8, make_xi_basis(4, 2), 0.0, 0.5, 0.1, 0.05)


def test_coarsen():
    s = series_of(np.zeros((1, 8, 8, 8)), t1=0.5, pad=0.1, dt=0.025)
    c = coarsen(s, 0.05)
    assert c.dt == 0.05 and c.pad == pytest.approx(0.1) and c.n_frames == 1 + round(0.7 / 0.05)
    with pytest.raises(FieldError):
        coarsen(s, 0.03)


# ---------------------------------------------------------------- steps on resting data


@pytest.fixture(scope="module")
def resting_step():
    tri = resting_triple()
    return PerturbationStep(tri, SMALL, small_config())


class TestRestingStep:
    def test_no_active_directions(self, resting_step):
        assert resting_step.active == []

    def test_commutator_oracle(self, resting_step):
        # rho b = (0.3 + a cos)(b sin) e2: mollification acts per Fourier mode;
        # the multipliers come from a brute-force periodic convolution of the 1d kernel
        st_ = resting_step
        t = st_.sample_times()[0]
        snap = st_.snapshot(t)
        n, ell = 32, SMALL.ell
        prof = Profile("exp")
        m = int(np.floor(ell * n - 1e-12))
        offs = np.arange(-m, m + 1)
        w = prof(np.abs(offs) / (n * ell))
        w = w / w.sum()
        x = np.arange(n) / n

        def conv(f):
            return sum(wk * np.roll(f, -o) for o, wk in zip(offs, w))

        rho1 = 0.3 + 0.1 * np.cos(2 * np.pi * x)
        b2 = 0.1 * np.sin(2 * np.pi * x)
        expected = conv(rho1 * b2) - conv(rho1) * conv(b2)
        R1 = snap.terms["R1"]
        assert np.max(np.abs(R1.data[1] - expected[:, None, None])) <= 1e-6 * np.max(np.abs(expected))
        assert np.max(np.abs(R1.data[[0, 2]])) < 1e-15
        # the grid multiplier agrees with the brute-force kernel
        mult = space_multiplier(1, n, ell, prof)
        assert mult[1] == pytest.approx(np.sum(w * np.cos(2 * np.pi * offs / n)), rel=1e-12)

    def test_step_contract(self, resting_step):
        rep = resting_step.report(with_master=False)
        assert rep.div_b <= 1e-8 and rep.mean_drift <= 1e-10 and rep.split_exactness == 0.0
        for k in ("R2", "R3", "R4", "R5", "R6"):
            assert rep.error_norms[k] == 0.0

    def test_iterate_one_equals_step(self):
        tri = resting_triple()
        _, rep, _ = perturbation_step(tri, SMALL, small_config(), with_master=False)
        _, it = iterate(tri, [(SMALL, small_config())], 1)
        a, b = rep.as_dict(), it.steps[0].as_dict()
        for key in ("error_norms", "window_out", "div_b", "mean_drift", "ratio", "cde"):
            assert a[key] == b[key]

    def test_iterate_two_steps(self):
        tri = resting_triple()
        out, it = iterate(tri, [(SMALL, small_config())] * 2, 2, dt_in=[1 / 256, 1 / 64])
        assert len(it.steps) == 2
        assert out.window[1] > out.window[0]
        assert it.windows[1][1] < it.windows[0][1]
        assert it.energy_error == [None, None]
        assert '"rho_increments"' in it.to_json()

    def test_iterate_validation(self):
        with pytest.raises(ParamError):
            iterate(resting_triple(), [], 0)
        with pytest.raises(ParamError):
            iterate(resting_triple(), [(SMALL, small_config())], 2)


def test_window_exhausted():
    tri = resting_triple(t1=0.1)
    with pytest.raises(StepError):
        PerturbationStep(tri, SMALL, small_config())


def test_gate_failure():
    # 16 points do not resolve the smallest bump
    tri = shear_triple(16, BASIS, 0.0, 0.8, 0.45, 1 / 256)
    with pytest.raises(GateError) as info:
        PerturbationStep(tri, SMALL, small_config())
    assert [g.name for g in info.value.gates] == ["resolution"]


# ---------------------------------------------------------------- constant-coefficient blocks


@pytest.fixture(scope="module")
def all_directions_step():
    params = SchemeParams(eta=1.05, rbar=0.26, lam=4, ell=0.07, sigma=16.0, directions="all")
    return PerturbationStep(resting_triple(), params, small_config(anchors=None, anchor_seed=3))


class TestConstantCoefficients:
    def test_principal_density(self, all_directions_step):
        st_ = all_directions_step
        t = st_.sample_times()[0]
        theta_P, W_P = principal_perturbations(st_, t)
        snap = st_.snapshot(t)
        expected = PeriodicField.zeros(3, 32)
        for j, b in snap.blocks.items():
            expected = expected + b["fields"].theta * (st_.params.eta / st_.params.sigma)
        assert lp_norm(theta_P - expected, np.inf) <= 1e-10 * lp_norm(expected, np.inf)
        assert lp_norm(divergence(W_P), 2) <= 1e-8 * max(lp_norm(W_P, 2), 1.0)

    def test_corrector_vanishes(self, all_directions_step):
        st_ = all_directions_step
        t = st_.sample_times()[1]
        tc = time_corrector(st_, t)
        assert lp_norm(tc["theta_T"], np.inf) == 0.0
        assert all(lp_norm(p, np.inf) == 0.0 for p in tc["psi"].values())

    def test_error_terms_vanish(self, all_directions_step):
        st_ = all_directions_step
        t = st_.sample_times()[0]
        _, terms = assemble_new_error(st_, t)
        for k in ("R2", "R3", "R4", "R5", "R6"):
            assert lp_norm(terms[k], 1) <= 1e-6, k

    def test_space_corrector(self, all_directions_step):
        st_ = all_directions_step
        t = st_.sample_times()[0]
        snap = st_.snapshot(t)
        c = space_corrector(snap.theta_P, snap.theta_T)
        assert c == snap.theta_C
        assert abs(c) <= lp_norm(snap.theta_P, 1) + lp_norm(snap.theta_T, 1)
        assert abs(float(snap.theta.mean()[0])) <= 1e-12
        z = PeriodicField.zeros(3, 8)
        assert space_corrector(z, z) == 0.0

    def test_period_saturates_floor(self, all_directions_step):
        st_ = all_directions_step
        t = st_.sample_times()[0]
        for j, b in st_.snapshot(t).blocks.items():
            assert b["tau"] == pytest.approx(st_.params.tau_floor(), rel=1e-10)


# ---------------------------------------------------------------- varying coefficients


@pytest.fixture(scope="module")
def shear_step():
    from pathlib import Path
    from convexint.cli import build_triple, load_config
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "small.toml")
    return PerturbationStep(build_triple(cfg), *cfg.schedule[0])


class TestTimeCorrector:
    def test_vanishes_at_start(self, shear_step):
        assert lp_norm(shear_step.theta_T(shear_step.t0), np.inf) == 0.0

    def test_exchanged_order_matches_definition(self, shear_step):
        # the evaluated form swaps the time and path integrals; the definition
        # integrates the rate in time and converges towards it
        t = shear_step.t0 + 0.01
        fast = shear_step.theta_T(t)
        rel = {n: lp_norm(fast - shear_step.theta_T_direct(t, nodes=n), 1) / lp_norm(fast, 1) for n in (17, 33)}
        assert rel[33] <= 1e-2
        assert rel[33] < rel[17] / 3

    def test_total_density_mean_zero(self, shear_step):
        snap = shear_step.snapshot(shear_step.sample_times()[0])
        assert abs(float(snap.theta.mean()[0])) <= 1e-12
        assert abs(snap.theta_C) <= lp_norm(snap.theta_P, 1) + lp_norm(snap.theta_T, 1)
