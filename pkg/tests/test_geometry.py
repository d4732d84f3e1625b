import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexint.fields import PeriodicField, lp_norm
from convexint.geometry import (GeometryError, OrbitRestriction, find_separation_anchors, make_xi_basis,
                                min_pairwise_distance, orbit_average_field, orbit_distance,
                                partition_of_unity, path_average, sampled_orbit_distance, trace_field)


class TestBasis:
    def test_lambda_ten(self):
        b = make_xi_basis(3, 10)
        assert b.L == 100
        np.testing.assert_allclose(b.xis[0], [1, 0.1, 0.01], rtol=0, atol=1e-15)
        np.testing.assert_allclose(b.xis[1], [0.01, 1, 0.1], rtol=0, atol=1e-15)
        np.testing.assert_allclose(b.xis[2], [0.1, 0.01, 1], rtol=0, atol=1e-15)
        assert b.xis[0] @ b.xis[1] == pytest.approx(0.111, abs=1e-14)

    def test_negatives(self):
        b = make_xi_basis(3, 10)
        for j in range(3):
            assert np.array_equal(b.xis[3 + j], -b.xis[j])

    @pytest.mark.parametrize("d,lam", [(3, 2), (3, 7), (4, 3), (5, 4)])
    def test_integer_length_and_lattice(self, d, lam):
        b = make_xi_basis(d, lam)
        assert b.L == lam ** (d - 1)
        assert np.array_equal(b.lattice, np.rint(b.xis * b.L).astype(int))
        # near-orthonormal: coherence constant stays bounded
        assert b.coherence < 2.5

    def test_rejects(self):
        with pytest.raises(GeometryError):
            make_xi_basis(2, 4)
        with pytest.raises(GeometryError):
            make_xi_basis(3, 1)


class TestPathAverage:
    def test_constant(self):
        b = make_xi_basis(3, 4)
        f = PeriodicField(np.full((1, 8, 8, 8), 0.7))
        assert path_average(f, b, 0, [0.3, 0.1, 0.9]) == pytest.approx(0.7, abs=1e-14)

    @pytest.mark.parametrize("axis", [0, 1])
    def test_winding_cosines(self, axis):
        b = make_xi_basis(3, 10)
        f = lambda p: np.cos(2 * np.pi * p[:, axis])  # noqa: E731
        assert abs(path_average(f, b, 0, [0, 0, 0])) < 1e-12

    def test_field_matches_callable(self):
        b = make_xi_basis(3, 4)
        f = PeriodicField.from_function(lambda x: np.cos(2 * np.pi * (x[0] + 4 * x[2])) + np.sin(2 * np.pi * x[1]), 3, 16)
        g = lambda p: np.cos(2 * np.pi * (p[:, 0] + 4 * p[:, 2])) + np.sin(2 * np.pi * p[:, 1])  # noqa: E731
        a = [0.2, 0.5, 0.1]
        assert path_average(f, b, 1, a) == pytest.approx(path_average(g, b, 1, a), abs=1e-12)

    def test_needs_enough_nodes(self):
        b = make_xi_basis(3, 4)
        with pytest.raises(GeometryError):
            path_average(lambda p: p[:, 0], b, 0, [0, 0, 0], M=10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_orbit_average_field_agrees(self, seed):
        rng = np.random.default_rng(seed)
        b = make_xi_basis(3, 4)
        # band-limited data (no Nyquist modes), where both evaluations are exact
        spec = np.zeros((8, 8, 8), dtype=complex)
        low = np.r_[0:3, 6:8]
        spec[np.ix_(low, low, low)] = rng.normal(size=(5, 5, 5)) + 1j * rng.normal(size=(5, 5, 5))
        f = PeriodicField(np.fft.ifftn(spec).real[None])
        avg = orbit_average_field(f, b, 2)
        i = tuple(rng.integers(0, 8, size=3))
        x = np.array(i) / 8
        assert avg.data[0][i] == pytest.approx(path_average(f, b, 2, x), abs=1e-10)

    def test_restriction_derivative(self):
        b = make_xi_basis(3, 4)
        f = PeriodicField.from_function(lambda x: np.sin(2 * np.pi * (x[0] - x[1])), 3, 8)
        rest = OrbitRestriction(f, b, 0, [0.1, 0.2, 0.3])
        u = np.array([0.3, 1.7])
        h = 1e-5
        fd = (rest(u + h) - rest(u - h)) / (2 * h)
        np.testing.assert_allclose(rest.derivative(u), fd, atol=1e-7)


@pytest.fixture(scope="module")
def pu():
    return partition_of_unity(make_xi_basis(3, 4), 0, [0.1, 0.2, 0.3], 64)


class TestPartition:
    def test_unit_integral(self, pu):
        assert float(pu.u_grid.mean()[0]) == pytest.approx(1.0, abs=1e-6)

    def test_average_one(self, pu):
        rng = np.random.default_rng(0)
        for x in rng.uniform(size=(20, 3)):
            # the path average of U through x, sampled off-grid
            assert path_average(pu, pu.basis, 0, x) == pytest.approx(1.0, abs=1e-3)

    def test_vanishes_far_from_anchor(self, pu):
        far = (pu.anchor + 0.5) % 1.0
        assert pu(far[None, :])[0] == 0.0

    def test_nonnegative(self, pu):
        assert pu.u_grid.data.min() >= 0.0


class TestTrace:
    def test_constant_radius_mass(self):
        b = make_xi_basis(3, 4)
        r = 0.04
        f = trace_field(lambda u: np.full_like(u, r), b, 0, [0.1, 0.2, 0.3], 64)
        # each unit of path carries r^-d times the ball volume, over length L
        assert lp_norm(f, 1) == pytest.approx(b.L * 4 / 3 * np.pi, rel=0.02)

    def test_tubularity_guard(self):
        b = make_xi_basis(3, 4)
        with pytest.raises(GeometryError):
            trace_field(lambda u: np.full_like(u, 0.3), b, 0, [0, 0, 0], 16)


class TestSeparation:
    def test_zero_threshold(self):
        b = make_xi_basis(3, 4)
        res = find_separation_anchors(b, 0.0, seed=1, max_attempts=1)
        assert res.points.shape == (6, 3)

    def test_seeded_run(self):
        b = make_xi_basis(3, 4)
        res = find_separation_anchors(b, 0.01, seed=7, max_attempts=500)
        assert res.distance >= 0.01
        assert min_pairwise_distance(b, res.points, res.directions) >= 0.01
        again = find_separation_anchors(b, 0.01, seed=7, max_attempts=500)
        assert np.array_equal(res.points, again.points)
        assert '"seed": 7' in res.to_json()

    def test_impossible(self):
        with pytest.raises(GeometryError):
            find_separation_anchors(make_xi_basis(3, 4), 0.9, seed=0, max_attempts=5)

    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([(0, 1), (0, 2), (1, 5), (0, 3)]))
    def test_exact_distance_matches_sampling(self, seed, pair):
        b = make_xi_basis(3, 2)
        rng = np.random.default_rng(seed)
        a, c = rng.uniform(size=(2, 3))
        exact = orbit_distance(b, pair[0], pair[1], a, c)
        sampled = sampled_orbit_distance(b, pair[0], pair[1], a, c, samples=64)
        assert exact <= sampled + 1e-9
        assert sampled - exact < 2e-3
