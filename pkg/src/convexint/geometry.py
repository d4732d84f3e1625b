"""Rational-direction orbits on the torus.

The direction xi = (1, 1/lambda, ..., lambda^(1-d)) closes after arc length
L = lambda^(d-1) because L*xi is an integer vector.  Everything here exploits
that integrality: the restriction of a trigonometric polynomial to an orbit is
a one-variable trigonometric polynomial of period L, and the orbit average of
a field is its projection onto the modes k with k . (L xi) = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import gamma, pi
from typing import Callable

import numpy as np
from scipy import integrate

from .bumps import smooth_step
from .fields import PeriodicField, _symmetric_coefficients, grid


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class XiBasis:
    d: int
    lam: int
    xis: np.ndarray      # (2d, d)
    lattice: np.ndarray  # (2d, d) integers, L * xis
    L: int

    @property
    def coherence(self) -> float:
        """max |xi_i . xi_j - delta_ij| * lambda over i <= j < d."""
        g = self.xis[: self.d] @ self.xis[: self.d].T
        return float(np.max(np.abs(g - np.eye(self.d))) * self.lam)

    def norm(self, j: int) -> float:
        return float(np.linalg.norm(self.xis[j]))

    def matrix(self) -> np.ndarray:
        """Columns xi_1 .. xi_d."""
        return self.xis[: self.d].T.copy()


def make_xi_basis(d: int, lam: int) -> XiBasis:
    if d < 3:
        raise GeometryError("the orbit construction needs d >= 3")
    if int(lam) != lam or lam < 2:
        raise GeometryError("lambda must be an integer >= 2")
    lam = int(lam)
    L = lam ** (d - 1)
    base = np.array([lam ** (d - 1 - i) for i in range(d)], dtype=np.int64)
    lattice = np.stack([np.roll(base, j) for j in range(d)])
    lattice = np.concatenate([lattice, -lattice])
    return XiBasis(d, lam, lattice / L, lattice, L)


def torus_displacement(x: np.ndarray, center) -> np.ndarray:
    """Minimal-image displacement x - center, component axis first."""
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * (x.ndim - 1))
    y = x - c
    return y - np.round(y)


# ---------------------------------------------------------------- orbit restriction


class OrbitRestriction:
    """f(anchor + u xi_j) as a trigonometric polynomial in u of period L.

    Exact for the trigonometric interpolant of the field.  ``derivs`` lists
    extra spectral multipliers (as direction vectors) to restrict as well.
    """

    def __init__(self, f: PeriodicField, basis: XiBasis, j: int, anchor, dense: bool = False):
        if not f.is_scalar:
            raise GeometryError("orbit restriction expects a scalar field")
        coef, freqs = _symmetric_coefficients(f)
        coef = coef[0]
        d = f.dim
        ks = np.meshgrid(*([freqs] * d), indexing="ij")
        anchor = np.asarray(anchor, dtype=float)
        phase = np.exp(2j * np.pi * sum(k * a for k, a in zip(ks, anchor)))
        m = sum(k * int(c) for k, c in zip(ks, basis.lattice[j]))
        self.m_min = int(m.min())
        size = int(m.max()) - self.m_min + 1
        vals = (coef * phase).ravel()
        idx = (m - self.m_min).ravel()
        self.c = (np.bincount(idx, vals.real, size) + 1j * np.bincount(idx, vals.imag, size))
        self.m = np.arange(self.m_min, self.m_min + size)
        if not dense:
            keep = np.abs(self.c) > 0
            self.c, self.m = self.c[keep], self.m[keep]
        self.L = basis.L

    @property
    def mean(self) -> float:
        hit = self.m == 0
        return float(self.c[hit].real.sum()) if hit.any() else 0.0

    def __call__(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        e = np.exp(2j * np.pi * np.outer(u, self.m) / self.L)
        return (e @ self.c).real

    def derivative(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        e = np.exp(2j * np.pi * np.outer(u, self.m) / self.L)
        return (e @ (self.c * 2j * np.pi * self.m / self.L)).real


def orbit_average_field(f: PeriodicField, basis: XiBasis, j: int) -> PeriodicField:
    """x -> (1/L) int_0^L f(x + u xi_j) du, exactly, as a Fourier projection."""
    from .fields import spectrum, from_spectrum, _wavenumbers
    ks, _ = _wavenumbers(f.dim, f.grid_size)
    m = sum(k * int(c) for k, c in zip(ks, basis.lattice[j]))
    return from_spectrum(spectrum(f) * (m == 0), f.dim, f.grid_size)


def default_nodes(basis: XiBasis, n: int = 0) -> int:
    return max(4096, 8 * basis.L * n)


def path_average(f, basis: XiBasis, j: int, anchor, M: int | None = None) -> float:
    """(1/L) int_0^L f(anchor + u xi_j) du by the composite trapezoid rule.

    ``f`` is a PeriodicField or a callable of points (M, d) -> values.
    """
    M = default_nodes(basis, getattr(f, "grid_size", 0)) if M is None else int(M)
    if M < 4 * basis.L:
        raise GeometryError(f"need at least 4L = {4 * basis.L} nodes, got {M}")
    u = np.arange(M) * (basis.L / M)
    if isinstance(f, PeriodicField):
        return float(np.mean(OrbitRestriction(f, basis, j, anchor)(u)))
    pts = np.asarray(anchor, dtype=float)[None, :] + u[:, None] * basis.xis[j][None, :]
    return float(np.mean(np.asarray(f(pts % 1.0)).reshape(-1)))


# ---------------------------------------------------------------- partition of unity


def _plateau_mass(d: int) -> float:
    sphere = 2 * pi ** (d / 2) / gamma(d / 2)
    val, _ = integrate.quad(lambda s: float(smooth_step(s)) * s ** (d - 1), 0.0, 1.0,
                            epsabs=1e-15, epsrel=1e-13, limit=200)
    return sphere * val


class SparseTrig:
    """Real trigonometric polynomial stored by its nonzero modes."""

    def __init__(self, f: PeriodicField, tol: float = 0.0):
        coef, freqs = _symmetric_coefficients(f)
        coef = coef[0]
        keep = np.abs(coef) > tol * np.abs(coef).max()
        idx = np.nonzero(keep)
        self.k = np.stack([freqs[i] for i in idx], axis=1).astype(float)
        self.c = coef[idx]

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(pts.shape[0])
        for s in range(0, pts.shape[0], 4096):
            p = pts[s:s + 4096]
            out[s:s + 4096] = (np.exp(2j * np.pi * p @ self.k.T) @ self.c).real
        return out


@dataclass
class PartitionOfUnity:
    """U = Omega / Omega~ around an anchor on orbit j."""

    basis: XiBasis
    j: int
    anchor: np.ndarray
    n: int
    c: int
    radius: float
    omega_grid: PeriodicField
    omega_avg: PeriodicField  # Omega~ on the grid
    u_grid: PeriodicField
    _avg_eval: SparseTrig = field(repr=False, default=None)

    def omega(self, points) -> np.ndarray:
        """Omega at points of shape (M, d)."""
        y = np.asarray(points, dtype=float) - self.anchor[None, :]
        y = y - np.round(y)
        s = np.linalg.norm(y, axis=1) / self.radius
        return smooth_step(s) / (_plateau_mass(self.basis.d) * self.radius**self.basis.d)

    def omega_average(self, points) -> np.ndarray:
        return self._avg_eval(points)

    def __call__(self, points) -> np.ndarray:
        return self.omega(points) / self.omega_average(points)

    @property
    def min_normalizer(self) -> float:
        return float(self.omega_avg.data.min())


def sample_plateau(anchor, radius: float, d: int, n: int) -> PeriodicField:
    y = torus_displacement(grid(d, n), anchor)
    s = np.sqrt(np.sum(y * y, axis=0)) / radius
    return PeriodicField((smooth_step(s) / (_plateau_mass(d) * radius**d))[None])


def partition_of_unity(basis: XiBasis, j: int, anchor, n: int,
                       c_values=(1, 2, 4, 8), floor: float = 0.5) -> PartitionOfUnity:
    """Smallest c with Omega~ >= floor everywhere; Omega is a plateau bump of
    radius c/lambda normalized to unit mass."""
    anchor = np.asarray(anchor, dtype=float) % 1.0
    best = None
    for c in c_values:
        radius = c / basis.lam
        if radius >= 0.5:
            break
        omega = sample_plateau(anchor, radius, basis.d, n)
        avg = orbit_average_field(omega, basis, j)
        lo = float(avg.data.min())
        best = (c, lo)
        if lo >= floor:
            u = PeriodicField(omega.data / avg.data)
            pu = PartitionOfUnity(basis, j, anchor, n, c, radius, omega, avg, u)
            pu._avg_eval = SparseTrig(avg, tol=1e-14)
            return pu
    raise GeometryError(f"orbit normalizer stays below {floor} (best c={best[0] if best else None}, "
                        f"min={best[1] if best else float('nan'):.3g}); lambda too small for the torus")


# ---------------------------------------------------------------- traces


def segment_spacing(basis: XiBasis, j: int) -> float:
    """Smallest distance between distinct strands of orbit j (the strands are
    the lattice points projected on the plane orthogonal to xi_j)."""
    if basis.d != 3:
        raise GeometryError("strand spacing is implemented for d = 3")
    return parallel_orbit_distance(basis, j, np.zeros(3), exclude_zero=True)


def trace_field(r_profile: Callable, basis: XiBasis, j: int, anchor, n: int,
                M: int | None = None, check_tubular: bool = True) -> PeriodicField:
    """Grid samples of int_0^L r(u)^-d 1{|x - anchor - u xi_j| < r(u)} du."""
    M = default_nodes(basis, n) if M is None else int(M)
    d = basis.d
    u = np.arange(M) * (basis.L / M)
    r = np.broadcast_to(np.asarray(r_profile(u), dtype=float), u.shape)
    if r.min() <= 0:
        raise GeometryError("radius profile must be positive")
    if check_tubular and 2 * r.max() > segment_spacing(basis, j):
        raise GeometryError(f"r_max={r.max():.4g} breaks tubularity "
                            f"(strand spacing {segment_spacing(basis, j):.4g})")
    centers = (np.asarray(anchor, dtype=float)[None, :] + u[:, None] * basis.xis[j][None, :]) % 1.0
    weights = (basis.L / M) * r ** (-d)
    return scatter_radial(centers, r, weights, lambda s: (s < 1.0).astype(float), d, n)


def scatter_radial(centers: np.ndarray, radii: np.ndarray, weights: np.ndarray,
                   profile: Callable, d: int, n: int, chunk: int = 64) -> PeriodicField:
    """Sum over k of weights[k] * profile(|x - centers[k]| / radii[k]) on the grid."""
    out = np.zeros(n**d)
    rmax = float(np.max(radii))
    h = int(np.ceil(rmax * n)) + 1
    offs = np.arange(-h, h + 1)
    stencil = np.stack(np.meshgrid(*([offs] * d), indexing="ij"), axis=-1).reshape(-1, d)
    strides = n ** np.arange(d - 1, -1, -1)
    for s in range(0, centers.shape[0], chunk):
        c = centers[s:s + chunk]
        base = np.floor(c * n).astype(np.int64)
        idx = base[:, None, :] + stencil[None, :, :]          # (K, S, d)
        disp = idx / n - c[:, None, :]
        dist = np.sqrt(np.sum(disp * disp, axis=2)) / radii[s:s + chunk, None]
        vals = profile(dist) * weights[s:s + chunk, None]
        flat = (np.mod(idx, n) * strides).sum(axis=2)
        mask = vals != 0
        out += np.bincount(flat[mask], vals[mask], n**d)
    return PeriodicField(out.reshape((1,) + (n,) * d))


# ---------------------------------------------------------------- orbit separation


def parallel_orbit_distance(basis: XiBasis, j: int, offset, exclude_zero: bool = False) -> float:
    """Distance on the torus between the orbit of xi_j through 0 and its
    translate by ``offset``: the minimum over integer n of |P(n + offset)|,
    P the projection orthogonal to xi_j."""
    v = basis.lattice[j].astype(float)
    vhat = v / np.linalg.norm(v)
    unit = int(np.nonzero(np.abs(basis.lattice[j]) == 1)[0][0])
    free = [a for a in range(basis.d) if a != unit]
    off = np.asarray(offset, dtype=float)

    def proj(x):
        return x - np.outer(x @ vhat, vhat)

    # continuous minimizer in the two free coordinates, then a scan around it
    A = proj(np.eye(basis.d)[free])                          # images of e_free
    b = proj(off[None, :])[0]
    sol, *_ = np.linalg.lstsq(A.T, -b, rcond=None)
    span = basis.L + 2
    g = np.arange(-span, span + 1)
    n1, n2 = np.meshgrid(np.round(sol[0]) + g, np.round(sol[1]) + g, indexing="ij")
    pts = n1.ravel()[:, None] * A[0] + n2.ravel()[:, None] * A[1] + b
    dist = np.linalg.norm(pts, axis=1)
    if exclude_zero:
        dist = dist[dist > 1e-9]
    return float(dist.min())


def orbit_distance(basis: XiBasis, i: int, j: int, xi_anchor, xj_anchor) -> float:
    """Exact torus distance between the orbits of xi_i and xi_j through the anchors (d = 3)."""
    if basis.d != 3:
        raise GeometryError("exact orbit distance is implemented for d = 3")
    a = np.asarray(xi_anchor, dtype=float) - np.asarray(xj_anchor, dtype=float)
    m = np.cross(basis.lattice[i], basis.lattice[j]).astype(np.int64)
    if not m.any():
        return parallel_orbit_distance(basis, i, a)
    g = int(np.gcd.reduce(np.abs(m)))
    prim = m // g
    t = float(a @ prim)
    return abs(t - round(t)) / float(np.linalg.norm(prim))


def sampled_orbit_distance(basis: XiBasis, i: int, j: int, xi_anchor, xj_anchor,
                           samples: int = 64, rng=None) -> float:
    """Independent check: dense (t, s) sampling plus a Newton polish."""
    from scipy.optimize import minimize
    L = basis.L
    t = np.linspace(0, L, samples * L, endpoint=False)
    s = np.linspace(0, L, samples * L, endpoint=False)
    pi_ = (np.asarray(xi_anchor)[None, :] + t[:, None] * basis.xis[i]) % 1.0
    pj = (np.asarray(xj_anchor)[None, :] + s[:, None] * basis.xis[j]) % 1.0
    best, arg = np.inf, (0.0, 0.0)
    for a in range(0, len(t), 512):
        diff = pi_[a:a + 512, None, :] - pj[None, :, :]
        diff -= np.round(diff)
        dd = np.sqrt(np.sum(diff * diff, axis=2))
        k = np.unravel_index(np.argmin(dd), dd.shape)
        if dd[k] < best:
            best, arg = float(dd[k]), (t[a + k[0]], s[k[1]])

    def f(z):
        y = (np.asarray(xi_anchor) + z[0] * basis.xis[i]) - (np.asarray(xj_anchor) + z[1] * basis.xis[j])
        y -= np.round(y)
        return float(y @ y)

    res = minimize(f, np.array(arg), method="BFGS")
    return min(best, float(np.sqrt(max(res.fun, 0.0))))


@dataclass
class SeparationAnchors:
    points: np.ndarray
    threshold: float
    seed: int
    distance: float
    directions: tuple

    def to_json(self) -> str:
        return json.dumps({"points": self.points.tolist(), "threshold": self.threshold,
                           "seed": self.seed, "distance": self.distance,
                           "directions": list(self.directions)}, indent=2)


def min_pairwise_distance(basis: XiBasis, points, directions) -> float:
    best = np.inf
    for a in range(len(directions)):
        for b in range(a + 1, len(directions)):
            best = min(best, orbit_distance(basis, directions[a], directions[b],
                                            points[a], points[b]))
    return float(best)


def find_separation_anchors(basis: XiBasis, threshold: float, seed: int = 0,
                            max_attempts: int = 1000, directions=None) -> SeparationAnchors:
    """Seeded rejection sampling of anchors whose orbits stay ``threshold`` apart."""
    directions = tuple(range(2 * basis.d)) if directions is None else tuple(directions)
    rng = np.random.default_rng(seed)
    best = (-1.0, None)
    for _ in range(max_attempts):
        pts = rng.random((len(directions), basis.d))
        dist = min_pairwise_distance(basis, pts, directions) if len(directions) > 1 else np.inf
        if dist >= threshold:
            return SeparationAnchors(pts, threshold, seed, float(min(dist, 1.0)), directions)
        if dist > best[0]:
            best = (dist, pts)
    raise GeometryError(f"no anchors reach distance {threshold} after {max_attempts} attempts "
                        f"(best {best[0]:.4g})")
