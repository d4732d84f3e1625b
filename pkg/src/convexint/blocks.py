"""Moving building blocks.

A block is a density bump theta_j and a divergence-free velocity bump w_j
riding along the orbit of xi_j.  Its radius follows the local size of the
error, its speed is tied to the radius, and its period is the time it needs
to close the orbit once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .bumps import Profile, smooth_step
from .fields import (PeriodicField, TimeSeriesField, curl, divergence, grid)
from .geometry import OrbitRestriction, XiBasis, torus_displacement


class ParamError(ValueError):
    pass


class BlockResolutionError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Gate:
    name: str
    value: float
    bound: float
    enforced: bool

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.bound)

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "bound": self.bound,
                "enforced": self.enforced, "passed": self.passed}


@dataclass(frozen=True)
class SchemeParams:
    """Desk-scale parameters of one perturbation step."""

    eta: float
    rbar: float
    lam: int
    ell: float
    sigma: float
    d: int = 3
    q: float = 2.0
    p: float | None = None
    mode: str = "desk"
    c_dq: float = 1.0
    directions: str = "active"

    def __post_init__(self):
        if self.d < 3:
            raise ParamError("d must be at least 3")
        if not self.q > 1:
            raise ParamError("q must exceed 1")
        for name in ("eta", "rbar", "ell", "sigma"):
            if not getattr(self, name) > 0:
                raise ParamError(f"{name} must be positive")
        if int(self.lam) != self.lam or self.lam < 2:
            raise ParamError("lam must be an integer >= 2")
        if self.mode not in ("desk", "paper"):
            raise ParamError(f"unknown mode {self.mode!r}")
        if self.directions not in ("active", "all"):
            raise ParamError(f"unknown directions policy {self.directions!r}")
        if self.p is not None and not self.p >= 1:
            raise ParamError("p must be at least 1")
        if self.alpha < -1e-12:
            raise ParamError(f"alpha = {self.alpha:.4g} is negative")

    @property
    def qp(self) -> float:
        return self.q / (self.q - 1)

    @property
    def p_eff(self) -> float:
        if self.p is not None:
            return float(self.p)
        inv = 1 + 1 / self.d - 1 / self.q
        if not 0 < inv <= 1:
            raise ParamError("no p >= 1 gives alpha = 0 for this (d, q)")
        return 1 / inv

    @property
    def alpha(self) -> float:
        return 1 + 1 / self.d - 1 / self.p_eff - 1 / self.q

    @property
    def L(self) -> int:
        return int(self.lam) ** (self.d - 1)

    @property
    def r_min(self) -> float:
        return self.rbar * self.eta ** (self.qp / self.d)

    @property
    def r_max_bound(self) -> float:
        return self.c_dq * self.rbar * self.ell ** (-self.qp) * self.eta ** (self.qp / self.d)

    @property
    def speed_scale(self) -> float:
        """sigma rbar^(-d/q') : arc speed is speed_scale / (R + eta)."""
        return self.sigma * self.rbar ** (-self.d / self.qp)

    def radius(self, R):
        return self.rbar * (np.asarray(R) + self.eta) ** (self.qp / self.d)

    def tau_floor(self) -> float:
        return self.rbar ** (self.d / self.qp) * self.L * self.eta / self.sigma

    def tau_bound(self, R_max: float) -> float:
        return self.rbar ** (self.d / self.qp) * self.L * (R_max + self.eta) / self.sigma

    def structural(self) -> dict:
        d, lam, ell = self.d, self.lam, self.ell
        c1 = ell ** (-d - 1) * (1 / lam + self.rbar ** (d / self.qp) * lam ** (d - 1)
                                * ell ** (-d) * self.eta / self.sigma)
        c2 = self.rbar * ell ** (-self.qp) * self.eta ** (self.qp / d)
        c2_bound = self.c_dq * lam ** (-(2 * d - 2) / (d - 2))
        return {"constraint1": c1, "constraint2": c2, "constraint2_bound": c2_bound}

    def gates(self, r_max: float, grid_size: int | None = None) -> list[Gate]:
        """Validity gates given the largest radius the data produce."""
        st = self.structural()
        out = [Gate("support", r_max / 2, 1 / self.lam, True),
               Gate("torus", r_max, 0.5, True),
               Gate("constraint1", st["constraint1"], 1.0, self.mode == "paper"),
               Gate("constraint2", st["constraint2"], st["constraint2_bound"], self.mode == "paper")]
        if grid_size is not None:
            out.append(Gate("resolution", 8.0 / grid_size, self.radius(0.0), True))
        return out

    def as_dict(self) -> dict:
        out = asdict(self)
        out.update(qp=self.qp, p_eff=self.p_eff, alpha=self.alpha, L=self.L,
                   r_min=self.r_min, r_max_bound=self.r_max_bound)
        return out


# ---------------------------------------------------------------- base profiles


@dataclass(frozen=True)
class BaseBlocks:
    """theta_bar: unit-mass radial bump in B_{1/2}; w_bar_j = curl(chi * xi_j x y / 2)."""

    basis: XiBasis
    profile: Profile = field(default_factory=lambda: Profile("poly", 8))
    cutoff_order: int = 10

    @property
    def d(self) -> int:
        return self.basis.d

    @property
    def mass(self) -> float:
        return self.profile.ball_integral(self.d) * 0.5**self.d

    def theta_radial(self, s):
        """theta_bar as a function of |y|."""
        return self.profile(2.0 * np.asarray(s)) / self.mass

    def theta_radial_derivative(self, s):
        return 2.0 * self.profile.derivative(2.0 * np.asarray(s)) / self.mass

    def theta_bar(self, y):
        """y has the component axis first."""
        return self.theta_radial(np.sqrt(np.sum(np.asarray(y) ** 2, axis=0)))

    def potential(self, y, j: int):
        """chi(|y|) xi_j x y / 2, whose curl is xi_j on B_{1/2}."""
        y = np.asarray(y)
        chi = smooth_step(np.sqrt(np.sum(y * y, axis=0)), self.cutoff_order)
        xi = self.basis.xis[j].reshape((3,) + (1,) * (y.ndim - 1))
        return 0.5 * chi * np.cross(xi, y, axis=0)


def make_base_blocks(d: int, basis: XiBasis, order: int = 8, cutoff_order: int = 10) -> BaseBlocks:
    if d != 3 or basis.d != 3:
        raise ParamError("the vector-potential velocity profile is three dimensional")
    return BaseBlocks(basis, Profile("poly", order), cutoff_order)


@dataclass
class Blocks:
    theta: PeriodicField
    w: PeriodicField
    D: PeriodicField


def check_resolution(r: float, n: int) -> None:
    if r * n < 8:
        raise BlockResolutionError(f"bump of radius {r:.4g} spans {r * n:.2f} < 8 grid points at N={n}")
    if r >= 0.5:
        raise BlockResolutionError(f"radius {r:.4g} does not fit in the torus")


def block_displacement(center, r: float, n: int, d: int = 3) -> np.ndarray:
    return torus_displacement(grid(d, n), center) / r


def moving_blocks(center, r: float, j: int, base: BaseBlocks, params: SchemeParams,
                  n: int) -> Blocks:
    """theta_j, w_j and D_j for a ball of radius r centred at ``center``."""
    check_resolution(r, n)
    d = base.d
    y = block_displacement(center, r, n, d)
    tb = base.theta_bar(y)[None]
    theta = PeriodicField(r ** (-d / params.q) * tb)
    D = PeriodicField(r ** (-d) * tb)
    # curl_x (r A((x-c)/r)) = (curl A)((x-c)/r); sampled pointwise, differentiated spectrally
    w = curl(PeriodicField(r * base.potential(y, j))) * r ** (-d / params.qp)
    return Blocks(theta, w, D)


def theta_time_derivative(center, r: float, xdot, rdot: float, base: BaseBlocks,
                          params: SchemeParams, n: int) -> PeriodicField:
    """Exact d/dt of r^(-d/q) theta_bar((x - c)/r) for moving c and r."""
    d = base.d
    y = block_displacement(center, r, n, d)
    s = np.sqrt(np.sum(y * y, axis=0))
    tb = base.theta_radial(s)
    dtb = base.theta_radial_derivative(s)
    xdot = np.asarray(xdot, dtype=float).reshape((d,) + (1,) * d)
    ydot_dot_y = np.sum(y * xdot, axis=0) / r + s * s * rdot / r
    ratio = np.where(s > 0, dtb / np.where(s > 0, s, 1.0), 0.0)
    val = -(d / params.q) * (rdot / r) * tb - ratio * ydot_dot_y
    return PeriodicField(r ** (-d / params.q) * val[None])


# ---------------------------------------------------------------- radius field


class RadiusField:
    """r_j = rbar (R_l^j + eta)^(q'/d) on the frames of a coefficient series."""

    def __init__(self, R: TimeSeriesField, params: SchemeParams):
        self.R, self.params = R, params

    def _coefficient(self, i: int) -> np.ndarray:
        a = np.asarray(self.R.frames[i])
        if a.min() < -1e-12:
            raise ParamError(f"negative coefficient {a.min():.3g} at frame {i}")
        return np.maximum(a, 0.0)

    def frame(self, i: int) -> PeriodicField:
        return PeriodicField(np.broadcast_to(self.params.radius(self._coefficient(i)),
                                             self.R.frames[i].shape).copy())

    def time_derivative(self, i: int, dR: PeriodicField | None = None) -> PeriodicField:
        """(q'/d) rbar^(d/q') r^(1-d/q') dR/dt, with dR/dt by centred differences
        unless supplied."""
        p = self.params
        r = self.frame(i).data
        dR = self.R.time_derivative(i) if dR is None else dR
        return PeriodicField((p.qp / p.d) * p.rbar ** (p.d / p.qp) * r ** (1 - p.d / p.qp) * dR.data)


def radius_field(R: TimeSeriesField, params: SchemeParams) -> RadiusField:
    return RadiusField(R, params)


# ---------------------------------------------------------------- orbit time series


def hermite_weights(s):
    s = np.asarray(s)
    s2, s3 = s * s, s * s * s
    return (2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, -2 * s3 + 3 * s2, s3 - s2)


def hermite_derivative_weights(s):
    s = np.asarray(s)
    s2 = s * s
    return (6 * s2 - 6 * s, 3 * s2 - 4 * s + 1, -6 * s2 + 6 * s, 3 * s2 - 2 * s)


class OrbitSeries:
    """R(t, anchor + u xi_j): trigonometric in u, cubic Hermite in t between
    frames (values and exact time derivatives at the frames)."""

    def __init__(self, t0: float, dt: float, values: list, derivs: list,
                 basis: XiBasis, j: int, anchor):
        if len(values) != len(derivs) or len(values) < 2:
            raise TrajectoryError("need at least two frames with derivatives")
        self.t0, self.dt, self.L = float(t0), float(dt), basis.L
        rs = [OrbitRestriction(f, basis, j, anchor, dense=True) for f in values]
        ds = [OrbitRestriction(f, basis, j, anchor, dense=True) for f in derivs]
        self.m = rs[0].m
        self.C = np.stack([r.c for r in rs])
        self.Cd = np.stack([r.c for r in ds])
        self.t1 = self.t0 + self.dt * (len(values) - 1)

    @classmethod
    def constant(cls, value: float, t0: float, t1: float, basis: XiBasis, j: int, anchor, n: int = 8):
        f = PeriodicField(np.full((1,) + (n,) * basis.d, float(value)))
        z = PeriodicField(np.zeros((1,) + (n,) * basis.d))
        return cls(t0, t1 - t0, [f, f], [z, z], basis, j, anchor)

    def _check(self, t):
        t = np.asarray(t)
        if t.min() < self.t0 - 1e-9 * self.dt or t.max() > self.t1 + 1e-9 * self.dt:
            raise TrajectoryError(f"time outside the data span [{self.t0:.6g}, {self.t1:.6g}]")

    def evaluate(self, t, u, chunk: int = 2048):
        """(R, dR/dt, dR/du) at the pairs (t, u)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        u = np.broadcast_to(np.atleast_1d(np.asarray(u, dtype=float)), t.shape)
        self._check(t)
        out = np.empty((3, t.size))
        k = 2j * np.pi * self.m / self.L
        nfr = self.C.shape[0]
        for s0 in range(0, t.size, chunk):
            tt, uu = t[s0:s0 + chunk], u[s0:s0 + chunk]
            x = (tt - self.t0) / self.dt
            i = np.clip(np.floor(x).astype(int), 0, nfr - 2)
            s = x - i
            h = hermite_weights(s)
            hd = hermite_derivative_weights(s)
            c = (h[0][:, None] * self.C[i] + (h[1] * self.dt)[:, None] * self.Cd[i]
                 + h[2][:, None] * self.C[i + 1] + (h[3] * self.dt)[:, None] * self.Cd[i + 1])
            ct = (hd[0][:, None] * self.C[i] / self.dt + hd[1][:, None] * self.Cd[i]
                  + hd[2][:, None] * self.C[i + 1] / self.dt + hd[3][:, None] * self.Cd[i + 1])
            e = np.exp(np.outer(uu, k))
            out[0, s0:s0 + chunk] = np.einsum("pm,pm->p", c, e).real
            out[1, s0:s0 + chunk] = np.einsum("pm,pm->p", ct, e).real
            out[2, s0:s0 + chunk] = np.einsum("pm,pm->p", c * k[None], e).real
        return out


# ---------------------------------------------------------------- trajectory


@dataclass
class Trajectory:
    """Centre x_j(t) = anchor + u(t) xi_j of the block of direction j.

    u is the cubic Hermite interpolant of the integrator nodes; every derived
    quantity (radius, period, their derivatives) is taken from it so that the
    block identities hold for one consistent continuous path.
    """

    j: int
    anchor: np.ndarray
    xi: np.ndarray
    L: int
    t: np.ndarray
    u: np.ndarray
    udot: np.ndarray
    params: SchemeParams
    series: OrbitSeries = field(repr=False)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        h = self.t[1] - self.t[0]
        if t.min() < self.t[0] - 1e-9 * h or t.max() > self.t[-1] + 1e-9 * h:
            raise TrajectoryError(f"time outside the trajectory window {self.span}")
        i = np.clip(np.floor((t - self.t[0]) / h).astype(int), 0, self.t.size - 2)
        return t, i, (t - self.t[i]) / h, h

    def u_at(self, t) -> np.ndarray:
        t, i, s, h = self._locate(t)
        w = hermite_weights(s)
        return w[0] * self.u[i] + w[1] * h * self.udot[i] + w[2] * self.u[i + 1] + w[3] * h * self.udot[i + 1]

    def du_at(self, t) -> np.ndarray:
        t, i, s, h = self._locate(t)
        w = hermite_derivative_weights(s)
        return (w[0] * self.u[i] / h + w[1] * self.udot[i] + w[2] * self.u[i + 1] / h
                + w[3] * self.udot[i + 1])

    def position(self, t) -> np.ndarray:
        u = self.u_at(t)
        return (self.anchor[None, :] + u[:, None] * self.xi[None, :]) % 1.0

    def velocity(self, t) -> np.ndarray:
        return self.du_at(t)[:, None] * self.xi[None, :]

    def speed(self, t) -> np.ndarray:
        return np.linalg.norm(self.xi) * self.du_at(t)

    def center_data(self, t) -> np.ndarray:
        """(R, dR/dt, d_xi R) of the coefficient at the centre."""
        return self.series.evaluate(t, self.u_at(t))

    def radius(self, t) -> np.ndarray:
        R = self.center_data(t)[0]
        return self.params.radius(np.maximum(R, 0.0))

    def radius_dot(self, t) -> np.ndarray:
        """d/dt r(t, x_j(t)) with the total derivative of R along the path."""
        p = self.params
        R, Rt, Ru = self.center_data(t)
        r = p.radius(np.maximum(R, 0.0))
        Rdot = Rt + Ru * self.du_at(t)
        return (p.qp / p.d) * p.rbar ** (p.d / p.qp) * r ** (1 - p.d / p.qp) * Rdot

    def time_of(self, u_target) -> np.ndarray:
        """Inverse of u (monotone) by bracketing on the nodes and Newton."""
        ut = np.atleast_1d(np.asarray(u_target, dtype=float))
        if ut.min() < self.u[0] - 1e-12 or ut.max() > self.u[-1] + 1e-12:
            raise TrajectoryError("arc value outside the integrated range (lookahead exhausted)")
        i = np.clip(np.searchsorted(self.u, ut) - 1, 0, self.u.size - 2)
        h = self.t[1] - self.t[0]
        lo, hi = np.zeros_like(ut), np.ones_like(ut)
        s = (ut - self.u[i]) / (self.u[i + 1] - self.u[i])
        for _ in range(60):
            w = hermite_weights(s)
            f = w[0] * self.u[i] + w[1] * h * self.udot[i] + w[2] * self.u[i + 1] + w[3] * h * self.udot[i + 1] - ut
            wd = hermite_derivative_weights(s)
            fd = wd[0] * self.u[i] + wd[1] * h * self.udot[i] + wd[2] * self.u[i + 1] + wd[3] * h * self.udot[i + 1]
            lo = np.where(f < 0, s, lo)
            hi = np.where(f >= 0, s, hi)
            step = s - f / np.where(fd > 0, fd, 1.0)
            bad = (step <= lo) | (step >= hi) | (fd <= 0)
            s_new = np.where(bad, 0.5 * (lo + hi), step)
            if np.max(np.abs(s_new - s)) < 1e-15:
                s = s_new
                break
            s = s_new
        return self.t[i] + h * s

    def to_json(self, tau_samples: int = 32) -> str:
        per = PeriodFunction(self)
        lo, hi = per.domain
        ts = np.linspace(lo, hi, tau_samples)
        return json.dumps({"j": self.j, "anchor": self.anchor.tolist(), "L": self.L,
                           "t": self.t.tolist(), "u": self.u.tolist(),
                           "tau_t": ts.tolist(), "tau": per(ts).tolist()})


def integrate_trajectory(j: int, anchor, series: OrbitSeries, params: SchemeParams,
                         basis: XiBasis, t_start: float, t_end: float, dt_sub: float,
                         u0: float = 0.0) -> Trajectory:
    """Classical RK4 for u' = sigma rbar^(-d/q') / (R(t, anchor + u xi) + eta)."""
    p = params
    limit = p.r_min ** (p.d / p.qp) / (4 * p.sigma)
    if dt_sub > limit * (1 + 1e-12):
        raise TrajectoryError(f"dt_sub={dt_sub:.3g} exceeds the stability bound {limit:.3g}")
    if t_start < series.t0 - 1e-12 or t_end > series.t1 + 1e-12:
        raise TrajectoryError("trajectory window exceeds the data span")
    n = max(2, int(np.ceil((t_end - t_start) / dt_sub)))
    h = (t_end - t_start) / n
    t = t_start + h * np.arange(n + 1)
    t[-1] = t_end

    def rhs(tt, uu):
        R = series.evaluate(tt, uu)[0]
        return p.speed_scale / (np.maximum(R, 0.0) + p.eta)

    u = np.empty(n + 1)
    ud = np.empty(n + 1)
    u[0] = u0
    for k in range(n):
        k1 = rhs(t[k], u[k])[0]
        k2 = rhs(t[k] + h / 2, u[k] + h * k1 / 2)[0]
        k3 = rhs(t[k] + h / 2, u[k] + h * k2 / 2)[0]
        k4 = rhs(t[k] + h, u[k] + h * k3)[0]
        ud[k] = k1
        u[k + 1] = u[k] + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    ud[n] = rhs(t[n], u[n])[0]
    return Trajectory(j, np.asarray(anchor, dtype=float) % 1.0, basis.xis[j].copy(), basis.L,
                      t, u, ud, params, series)


class PeriodFunction:
    """tau_j(t): u(t + tau) - u(t) = L, and its derivative."""

    def __init__(self, traj: Trajectory):
        self.traj = traj

    @property
    def domain(self) -> tuple[float, float]:
        tr = self.traj
        last = tr.time_of(tr.u[-1] - tr.L)[0]
        return float(tr.t[0]), float(last)

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tr = self.traj
        return tr.time_of(tr.u_at(t) + tr.L) - t

    def derivative(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tr = self.traj
        return tr.du_at(t) / tr.du_at(t + self(t)) - 1.0

    def inverse_shift(self, s) -> np.ndarray:
        """zeta(s): the time whose period ends at s."""
        tr = self.traj
        return tr.time_of(tr.u_at(s) - tr.L)


def period_function(traj: Trajectory) -> PeriodFunction:
    return PeriodFunction(traj)


def moving_fields(traj: Trajectory, base: BaseBlocks, params: SchemeParams, t: float,
                  n: int) -> Blocks:
    x = traj.position(t)[0]
    r = float(traj.radius(t)[0])
    return moving_blocks(x, r, traj.j, base, params, n)


def cancellation_residual(traj: Trajectory, base: BaseBlocks, params: SchemeParams, t: float,
                          n: int, h: float) -> tuple[float, float]:
    """Relative L1 residual of
    d_t theta + sigma div(theta w) + (r'/r)[div((x - x_j) theta) - (d/q') theta] = 0,
    with d_t theta by centred differences of step h.  Returns (residual, |d_t theta|_L1)."""
    from .fields import lp_norm, multiply
    d = base.d
    blk = moving_fields(traj, base, params, t, n)
    plus = moving_fields(traj, base, params, t + h, n).theta
    minus = moving_fields(traj, base, params, t - h, n).theta
    dtheta = (plus - minus) * (1 / (2 * h))
    x = traj.position(t)[0]
    r = float(traj.radius(t)[0])
    rdot = float(traj.radius_dot(t)[0])
    y = torus_displacement(grid(d, n), x)
    ytheta = PeriodicField(y * blk.theta.data)
    rhs = (divergence(ytheta) - blk.theta * (d / params.qp)) * (-rdot / r)
    res = dtheta + divergence(multiply(blk.theta, blk.w)) * params.sigma - rhs
    scale = lp_norm(dtheta, 1)
    return lp_norm(res, 1) / scale, scale
