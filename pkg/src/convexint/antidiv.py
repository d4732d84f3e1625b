"""Divergence inverters: Bogovskii, crawled bumps, and the slow-times-fast inverse."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, gamma, pi
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.ndimage import map_coordinates
from scipy.special import betainc, beta as beta_fn

from .bumps import Profile, smooth_step
from .fields import (FieldError, PeriodicField, divergence, grid, multiply,
                     poisson_antidivergence, spectrum, from_spectrum, _wavenumbers,
                     resample, subtract_mean)
from .geometry import (PartitionOfUnity, XiBasis, partition_of_unity,
                       scatter_radial, torus_displacement)


class AntidivError(ValueError):
    pass


def sphere_area(d: int) -> float:
    return 2 * pi ** (d / 2) / gamma(d / 2)


# ---------------------------------------------------------------- Bogovskii


@dataclass(frozen=True)
class BogovskiiKernel:
    """Unit-mass radial weight phi on the unit ball and the quadrature orders.

    With the polynomial profile the phi-ray moments are integrated exactly.
    """

    profile: Profile = field(default_factory=lambda: Profile("poly", 8))
    ray_nodes: int = 32
    polar_nodes: int = 16

    def mass(self, d: int) -> float:
        return self.profile.ball_integral(d)


def sphere_quadrature(d: int, n_polar: int) -> tuple[np.ndarray, np.ndarray]:
    """Directions and weights on S^(d-1) (product Gauss rule, d = 2 or 3)."""
    if d == 2:
        m = 4 * n_polar
        a = 2 * pi * (np.arange(m) + 0.5) / m
        return np.stack([np.cos(a), np.sin(a)], axis=1), np.full(m, 2 * pi / m)
    if d != 3:
        raise AntidivError("sphere quadrature implemented for d = 2, 3")
    z, wz = np.polynomial.legendre.leggauss(n_polar)
    m = 2 * n_polar
    a = 2 * pi * (np.arange(m) + 0.5) / m
    zz, aa = np.meshgrid(z, a, indexing="ij")
    s = np.sqrt(1 - zz**2)
    dirs = np.stack([s * np.cos(aa), s * np.sin(aa), zz], axis=-1).reshape(-1, 3)
    w = (wz[:, None] * np.full(m, 2 * pi / m)[None, :]).reshape(-1)
    return dirs, w


def bogovskii_unit(g: Callable, points: np.ndarray, kernel: BogovskiiKernel,
                   chunk: int = 128) -> np.ndarray:
    """B_phi(g) at points of the unit ball (shape (P, d)); g is evaluated on
    arrays of shape (..., d) in the same unit-ball coordinates.

    Polar form: B g(X) = int_S w sum_k C(d-1,k) G_k(X,w) Phi_{d-1-k}(X,w) dw with
    G_k = int g(X - rho w) rho^k drho and Phi_m = int phi(X + s w) s^m ds.
    """
    P, d = points.shape
    dirs, wdir = sphere_quadrature(d, kernel.polar_nodes)
    tg, wg = np.polynomial.legendre.leggauss(kernel.ray_nodes)
    tg, wg = 0.5 * (tg + 1), 0.5 * wg
    if kernel.profile.kind == "poly":
        n_phi = kernel.profile.order + d + 1
    else:
        n_phi = kernel.ray_nodes
    tp, wp = np.polynomial.legendre.leggauss(n_phi)
    tp, wp = 0.5 * (tp + 1), 0.5 * wp
    phi_scale = 1.0 / kernel.mass(d)
    out = np.zeros((P, d))
    binoms = [comb(d - 1, k) for k in range(d)]
    for s0 in range(0, P, chunk):
        X = points[s0:s0 + chunk]
        xw = X @ dirs.T                                   # (p, D)
        disc = np.sqrt(np.maximum(xw**2 + 1.0 - np.sum(X * X, axis=1)[:, None], 0.0))
        s_exit = -xw + disc
        r_exit = xw + disc
        # phi moments
        sp = s_exit[..., None] * tp                       # (p, D, n)
        arg = np.sqrt(np.maximum(np.sum(X * X, axis=1)[:, None, None] + 2 * sp * xw[..., None]
                                 + sp**2, 0.0))
        phiv = phi_scale * kernel.profile(arg) * wp
        Phi = [s_exit ** (m + 1) * np.sum(phiv * tp**m, axis=-1) for m in range(d)]
        # g moments
        rg = r_exit[..., None] * tg                       # (p, D, n)
        Y = X[:, None, None, :] - rg[..., None] * dirs[None, :, None, :]
        gv = g(Y) * wg
        G = [r_exit ** (k + 1) * np.sum(gv * tg**k, axis=-1) for k in range(d)]
        acc = sum(binoms[k] * G[k] * Phi[d - 1 - k] for k in range(d))   # (p, D)
        out[s0:s0 + chunk] = (acc * wdir) @ dirs
    return out


def ball_points(center, radius: float, n: int, d: int):
    """Grid points of the torus within the open ball, as (flat indices,
    displacements from the center)."""
    h = int(np.ceil(radius * n)) + 1
    base = np.floor(np.asarray(center) * n).astype(np.int64)
    offs = np.arange(-h, h + 1)
    stencil = np.stack(np.meshgrid(*([offs] * d), indexing="ij"), axis=-1).reshape(-1, d)
    idx = base[None, :] + stencil
    disp = idx / n - np.asarray(center)[None, :]
    inside = np.sum(disp * disp, axis=1) < radius**2
    idx, disp = idx[inside], disp[inside]
    strides = n ** np.arange(d - 1, -1, -1)
    flat = (np.mod(idx, n) * strides).sum(axis=1)
    return flat, disp


def bogovskii(g: Callable, radius: float, center, n: int, d: int = 3,
              kernel: BogovskiiKernel = BogovskiiKernel(), mean_tol: float = 1e-8,
              check: bool = True) -> PeriodicField:
    """Scaled Bogovskii anti-divergence on the torus grid.

    ``g`` maps displacements from ``center`` (shape (..., d)) to values and
    must vanish outside the ball of the given radius.  The result is r B(g(r .))(./r)
    and vanishes identically outside the ball.
    """
    center = np.asarray(center, dtype=float) % 1.0
    if radius >= 0.5:
        raise AntidivError("Bogovskii ball must fit in the torus (radius < 1/2)")
    if check:
        flat, disp = ball_points(center, 1.5 * radius, n, d)
        vals = g(disp)
        outside = np.sum(disp * disp, axis=1) >= radius**2
        if np.any(np.abs(vals[outside]) > 1e-12 * max(np.abs(vals).max(), 1e-300)):
            raise AntidivError("g is not supported in the Bogovskii ball")
        l1 = np.abs(vals).sum()
        if abs(vals.sum()) > mean_tol * max(l1, 1e-300):
            raise AntidivError(f"g is not mean-zero (relative mean {vals.sum() / l1:.2e})")
    flat, disp = ball_points(center, radius, n, d)
    X = disp / radius

    def g_unit(Y):
        return g(radius * Y)

    vals = radius * bogovskii_unit(g_unit, X, kernel)
    out = np.zeros((d, n**d))
    for i in range(d):
        out[i, flat] = vals[:, i]
    return PeriodicField(out.reshape((d,) + (n,) * d))


class LocalSpline:
    """Cubic-spline interpolant of grid samples, evaluated at displacements
    from a center (values outside the supplied box are zero)."""

    def __init__(self, values: PeriodicField, center, radius: float):
        n, d = values.grid_size, values.dim
        h = int(np.ceil(radius * n)) + 4
        base = np.floor(np.asarray(center) * n).astype(np.int64)
        idx = [np.mod(base[a] + np.arange(-h, h + 1), n) for a in range(d)]
        self.box = values.data[0][np.ix_(*idx)]
        self.origin = (base - h) / n - np.asarray(center)
        self.n = n
        from scipy.ndimage import spline_filter
        self.coef = spline_filter(self.box, order=3, mode="nearest")

    def __call__(self, disp):
        disp = np.asarray(disp)
        shape = disp.shape[:-1]
        pts = ((disp.reshape(-1, disp.shape[-1]) - self.origin) * self.n).T
        vals = map_coordinates(self.coef, pts, order=3, mode="constant", cval=0.0,
                               prefilter=False)
        return vals.reshape(shape)


# ---------------------------------------------------------------- radial anti-divergence


def radial_mass_function(profile: Profile, d: int) -> Callable:
    """x -> int_0^x k(t) t^(d-1) dt for the unit-mass bump k(t) = profile(t)/mass."""
    mass = profile.ball_integral(d)
    if profile.kind == "poly":
        m = profile.order
        full = 0.5 * beta_fn(d / 2, m + 1)

        def mfun(x):
            u = np.clip(np.asarray(x, dtype=float), 0.0, 1.0) ** 2
            return full * betainc(d / 2, m + 1, u) / mass
        return mfun
    return tabulated_mass(lambda t: profile(t), d, mass)


def tabulated_mass(fn: Callable, d: int, mass: float, samples: int = 20001) -> Callable:
    t = np.linspace(0.0, 1.0, samples)
    vals = fn(t) * t ** (d - 1)
    cum = integrate.cumulative_trapezoid(vals, t, initial=0.0)
    # Richardson-corrected table from two resolutions
    t2 = np.linspace(0.0, 1.0, 2 * samples - 1)
    cum2 = integrate.cumulative_trapezoid(fn(t2) * t2 ** (d - 1), t2, initial=0.0)[::2]
    table = (4 * cum2 - cum) / 3 / mass

    def mfun(x):
        return np.interp(np.clip(np.asarray(x, dtype=float), 0.0, 1.0), t, table)
    return mfun


def plateau_mass_function(d: int) -> Callable:
    from .geometry import _plateau_mass
    return tabulated_mass(lambda t: smooth_step(t), d, _plateau_mass(d))


def radial_antidivergence(disp: np.ndarray, mass_fn: Callable) -> np.ndarray:
    """y |y|^-d m(|y|) for displacements (P, d) given the cumulative radial
    mass m of a mean-zero radial density (m must vanish beyond its support)."""
    d = disp.shape[1]
    r = np.sqrt(np.sum(disp * disp, axis=1))
    safe = np.where(r > 0, r, 1.0)
    coef = np.where(r > 0, mass_fn(r) / safe**d, 0.0)
    return disp * coef[:, None]


# ---------------------------------------------------------------- crawled anti-divergence


@dataclass
class CrawlProfile:
    """Unit-mass radial bumps D(u_k, .) centered at anchor + u_k xi_j with
    support radii ``radii`` and path weights (summing to L)."""

    u: np.ndarray
    radii: np.ndarray
    weights: np.ndarray
    profile: Profile = field(default_factory=lambda: Profile("poly", 10))


@dataclass
class CrawlResult:
    v: PeriodicField
    average: PeriodicField      # (1/L) sum_k w_k D(u_k, .) on the grid
    partition: PartitionOfUnity
    residual: float             # |div v - (average - 1)|_L1 / |average - 1|_L1


def translation_multiplier(basis: XiBasis, j: int, dim: int, n: int, u: np.ndarray,
                           weights: np.ndarray) -> np.ndarray:
    """Fourier multiplier of f -> (1/L) sum_k w_k f(. - u_k xi_j) in rfftn layout."""
    ks, _ = _wavenumbers(dim, n)
    m = sum(k * int(c) for k, c in zip(ks, basis.lattice[j])).astype(np.int64)
    lo, hi = int(m.min()), int(m.max())
    mm = np.arange(lo, hi + 1)
    S = np.zeros(mm.size, dtype=complex)
    for s in range(0, u.size, 512):
        S += np.exp(-2j * np.pi * np.outer(mm, u[s:s + 512]) / basis.L) @ weights[s:s + 512]
    return S[m - lo] / basis.L


class CrawlOperator:
    """Precomputed pieces of the crawled anti-divergence for one orbit."""

    def __init__(self, basis: XiBasis, j: int, anchor, n: int,
                 kernel: BogovskiiKernel = BogovskiiKernel(),
                 partition: PartitionOfUnity | None = None):
        self.basis, self.j, self.n = basis, j, n
        d = basis.d
        self.anchor = np.asarray(anchor, dtype=float) % 1.0
        self.pu = partition if partition is not None else partition_of_unity(basis, j, self.anchor, n)
        R = self.pu.radius
        # W = B(Omega - U) about the anchor, U = Omega / Omega~
        fine = resample(self.pu.omega_avg, 2 * n)
        avg_spline = LocalSpline(fine, self.anchor, R)
        from .geometry import _plateau_mass

        def g(disp):
            s = np.sqrt(np.sum(disp * disp, axis=-1)) / R
            om = smooth_step(s) / (_plateau_mass(d) * R**d)
            avg = avg_spline(disp)
            return np.where(om > 0, om * (1.0 - 1.0 / np.where(om > 0, avg, 1.0)), 0.0)

        flat, disp = ball_points(self.anchor, R, n, d)
        gv = g(disp)
        self.mean_defect = float(gv.sum() / n**d)
        # restore exact zero mean with a multiple of Omega (support unchanged)
        om_vals = smooth_step(np.sqrt(np.sum(disp * disp, axis=1)) / R)
        corr = gv.sum() / om_vals.sum()

        def g0(disp_):
            s = np.sqrt(np.sum(disp_ * disp_, axis=-1)) / R
            return g(disp_) - corr * smooth_step(s)

        self.W = bogovskii(g0, R, self.anchor, n, d, kernel, check=False)
        self.g0 = g0

    def __call__(self, crawl: CrawlProfile, premise_radius: float | None = None) -> CrawlResult:
        basis, n, d = self.basis, self.n, self.basis.d
        lim = 1.0 / basis.lam if premise_radius is None else premise_radius
        if np.max(crawl.radii) > lim + 1e-12:
            raise AntidivError(f"bump radius {np.max(crawl.radii):.4g} exceeds 1/lambda = {lim:.4g}")
        total = float(np.sum(crawl.weights))
        if abs(total - basis.L) > 1e-9 * basis.L:
            raise AntidivError(f"path weights sum to {total}, expected L = {basis.L}")
        R = self.pu.radius
        centers = (self.anchor[None, :] + crawl.u[:, None] * basis.xis[self.j][None, :]) % 1.0
        mass_d = radial_mass_function(crawl.profile, d)
        bump_mass = crawl.profile.ball_integral(d)
        plateau = plateau_mass_function(d)
        v = np.zeros((d, n**d))
        avg = np.zeros(n**d)
        for k in range(crawl.u.size):
            rk = crawl.radii[k]
            reach = max(rk, R)
            flat, disp = ball_points(centers[k], reach, n, d)
            dist = np.sqrt(np.sum(disp * disp, axis=1))

            def mass(r, rk=rk):
                return mass_d(r / rk) - plateau(r / R)

            F = radial_antidivergence(disp, mass)
            wk = crawl.weights[k] / basis.L
            for i in range(d):
                v[i] += np.bincount(flat, wk * F[:, i], n**d)
            dens = crawl.profile(dist / rk) / (bump_mass * rk**d)
            avg += np.bincount(flat, wk * dens, n**d)
        v = v.reshape((d,) + (n,) * d)
        mult = translation_multiplier(basis, self.j, d, n, crawl.u, crawl.weights)
        v += from_spectrum(spectrum(self.W) * mult[None], d, n).data
        vf = PeriodicField(v)
        af = PeriodicField(avg.reshape((1,) + (n,) * d))
        target = af.data - 1.0
        res = float(np.abs(divergence(vf).data - target).mean() / max(np.abs(target).mean(), 1e-300))
        return CrawlResult(vf, af, self.pu, res)


def crawled_antidivergence(crawl: CrawlProfile, basis: XiBasis, j: int, anchor, n: int,
                           kernel: BogovskiiKernel = BogovskiiKernel()) -> CrawlResult:
    return CrawlOperator(basis, j, anchor, n, kernel)(crawl)


def uniform_crawl(basis: XiBasis, radius, nodes: int, u0: float = 0.0,
                  profile: Profile | None = None) -> CrawlProfile:
    """Closed composite trapezoid over one period with optional radius profile."""
    u = u0 + np.linspace(0.0, basis.L, nodes + 1)
    w = np.full(nodes + 1, basis.L / nodes)
    w[0] = w[-1] = 0.5 * basis.L / nodes
    r = np.broadcast_to(np.asarray(radius(u) if callable(radius) else radius, dtype=float), u.shape)
    return CrawlProfile(u, np.array(r), w, profile or Profile("poly", 10))


# ---------------------------------------------------------------- improved anti-divergence


def improved_antidivergence(f: PeriodicField, v: PeriodicField) -> PeriodicField:
    """R(f, v) = f v - grad Delta^-1 (grad f . v + mean(f div v)).

    grad f . v is formed as div(f v) - f div v so that the divergence
    identity div R = f div v - mean(f div v) holds to round-off on the grid.
    """
    fv = multiply(f, v)
    fdivv = multiply(f, divergence(v))
    h = divergence(fv) - fdivv + float(fdivv.mean()[0])
    return fv - poisson_antidivergence(subtract_mean(h))
