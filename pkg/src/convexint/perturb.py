"""One step of the convex integration scheme and the iteration driver.

The step consumes a triple (rho, b, R) solving the continuity-defect
equation and returns a new triple whose fields are evaluated lazily: the
moving blocks are far too fast to be stored on a time grid fine enough to
see them, so every frame is computed on demand from the trajectories.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from math import gamma, pi, sqrt
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .antidiv import (BogovskiiKernel, CrawlOperator, CrawlProfile, improved_antidivergence)
from .blocks import (BaseBlocks, Gate, OrbitSeries, ParamError, PeriodFunction, SchemeParams,
                     Trajectory, integrate_trajectory, make_base_blocks, moving_blocks,
                     block_displacement, check_resolution, hermite_derivative_weights,
                     hermite_weights, theta_time_derivative)
from .fields import (FieldError, LazyFrames, MollifierSpec, PeriodicField, TimeSeriesField,
                     _compact, curl, divergence, directional_derivative, gradient, grid, lp_norm,
                     mollified_frame, mollify_time_weights, multiply, poisson_antidivergence,
                     sobolev_norm, subtract_mean)
from .geometry import (GeometryError, XiBasis, make_xi_basis, min_pairwise_distance,
                       scatter_radial, torus_displacement)


class StepError(RuntimeError):
    """A construction stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class GateError(StepError):
    def __init__(self, gates: list[Gate]):
        failed = ", ".join(f"{g.name} ({g.value:.4g} > {g.bound:.4g})" for g in gates)
        super().__init__("gates", f"validity gates failed: {failed}")
        self.gates = gates


TERMS = ("R1", "R2", "R3", "R4", "R5", "R6", "R7")


# ---------------------------------------------------------------- triples


@dataclass
class Triple:
    rho: TimeSeriesField
    b: TimeSeriesField
    R: TimeSeriesField
    eta: float | None = None
    phi: Callable | None = field(default=None, repr=False)

    @property
    def window(self) -> tuple[float, float]:
        return self.rho.t_start, self.rho.t_end

    @property
    def dim(self) -> int:
        return self.rho.dim

    @property
    def grid_size(self) -> int:
        return self.rho.grid_size

    def node_indices(self, samples: int | None = None) -> list[int]:
        idx = list(self.rho.window_indices())
        if samples is None or samples >= len(idx):
            return idx
        pick = np.linspace(0, len(idx) - 1, samples).round().astype(int)
        return [idx[k] for k in pick]

    def measured_eta(self, samples: int | None = None) -> float:
        return max(lp_norm(self.R.frame(i), 1) for i in self.node_indices(samples))

    def cde_residual(self, samples: int | None = None) -> tuple[float, float]:
        """max over nodes of |d_t rho + div(rho b) + div R|_L1 (centred in time,
        spectral in space) and of |div R|_L1."""
        worst, scale = 0.0, 0.0
        for i in self.node_indices(samples):
            res, dR = cde_residual_at(self, i)
            worst, scale = max(worst, res), max(scale, dR)
        return worst, scale

    def check_divergence_free(self, samples: int | None = None) -> float:
        return max(lp_norm(divergence(self.b.frame(i)), 2) for i in self.node_indices(samples))


def cde_residual_at(triple: Triple, i: int) -> tuple[float, float]:
    rho, b, R = triple.rho, triple.b, triple.R
    dt_rho = rho.time_derivative(i)
    flux = multiply(rho.frame(i), b.frame(i))
    divR = divergence(R.frame(i))
    res = dt_rho + divergence(flux) + divR
    return lp_norm(res, 1), lp_norm(divR, 1)


# ---------------------------------------------------------------- admissibility


@dataclass
class Condition:
    name: str
    value: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.value

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.bound)


@dataclass
class AdmissibilityReport:
    conditions: list[Condition]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def as_dict(self) -> dict:
        return {c.name: {"value": c.value, "bound": c.bound, "margin": c.margin, "passed": c.passed}
                for c in self.conditions}


def _time_gradient_norm(series: TimeSeriesField, i: int, s: float, k: int) -> float:
    """|(d_t f, grad f)|_{W^{k,s}} with the time derivative by centred differences."""
    f = series.frame(i)
    ft = series.time_derivative(i)
    total = 0.0
    for c in range(f.components):
        total += sobolev_norm(ft.scalar(c), k, s)
        g = gradient(f.scalar(c))
        total += sobolev_norm(g, k, s)
    return total


def admissibility_check(triple: Triple, a1: float, a2: float, T: float, eta: float,
                        q: float = 2.0, p: float = 1.2, samples: int | None = None) -> AdmissibilityReport:
    """Evaluate the three defining conditions of the admissible class on [0, T]."""
    idx = [i for i in triple.node_indices(samples) if triple.rho.times[i] <= T + 1e-12]
    err = max(lp_norm(triple.R.frame(i), 1) for i in idx)
    size = max(lp_norm(triple.rho.frame(i), q) + sobolev_norm(triple.b.frame(i), 1, p) for i in idx)
    deriv = max(_time_gradient_norm(triple.rho, i, q, 0) + _time_gradient_norm(triple.b, i, p, 1)
                for i in idx)
    return AdmissibilityReport([
        Condition("error", err, eta),
        Condition("size", size, 1 - 2 * eta ** a1),
        Condition("derivatives", deriv, eta ** (-a2)),
    ])


# ---------------------------------------------------------------- initial data


def cos_lq_norm(q: float) -> float:
    """|cos(2 pi x)|_{L^q(0,1)}."""
    return (gamma((q + 1) / 2) / (sqrt(pi) * gamma(q / 2 + 1))) ** (1 / q)


@dataclass
class PhiProfile:
    """Cubic spline through knots, with its exact derivative."""

    knots_t: tuple
    knots_v: tuple

    def __post_init__(self):
        self._spline = CubicSpline(np.asarray(self.knots_t, float), np.asarray(self.knots_v, float),
                                   bc_type="natural", extrapolate=True)
        self._deriv = self._spline.derivative()

    def __call__(self, t):
        return self._spline(t)

    def derivative(self, t):
        return self._deriv(t)


def initial_triple(phi, k: int, n: int, t_start: float, t_end: float, pad: float, dt: float,
                   q: float = 2.0, d: int = 3, dphi: Callable | None = None) -> Triple:
    """rho = phi cos(2 pi k x1)/c_q, b = 0, R = -phi' sin(2 pi k x1) e1 / (2 pi k c_q)."""
    if k < 1:
        raise ParamError("k must be a positive integer")
    dphi = dphi if dphi is not None else phi.derivative
    nt = 1 + int(round((t_end - t_start + 2 * pad) / dt))
    ts = t_start - pad + dt * np.arange(nt)
    if np.max(np.abs(phi(ts))) > 0.5 + 1e-12:
        raise ParamError("the profile must stay below 1/2")
    c = cos_lq_norm(q)
    x1 = np.arange(n) / n
    shape1 = (n,) + (1,) * (d - 1)
    cosx = np.cos(2 * pi * k * x1).reshape(shape1)
    sinx = np.sin(2 * pi * k * x1).reshape(shape1)
    full = (n,) * d
    rho = np.broadcast_to((np.asarray(phi(ts)).reshape((nt, 1) + (1,) * d) * cosx / c), (nt, 1) + full)
    Rx = -np.asarray(dphi(ts)).reshape((nt,) + (1,) * d) * sinx / (2 * pi * k * c)
    Rc = np.zeros((nt, d, n) + (1,) * (d - 1))
    Rc[:, 0] = Rx
    R = np.broadcast_to(Rc, (nt, d) + full)
    b = np.broadcast_to(np.zeros((1, 1) + (1,) * d), (nt, d) + full)
    tri = Triple(TimeSeriesField(t_start, t_end, pad, dt, rho), TimeSeriesField(t_start, t_end, pad, dt, b),
                 TimeSeriesField(t_start, t_end, pad, dt, R), phi=phi)
    tri.eta = initial_eta(dphi, k, q, ts[(ts >= t_start - 1e-12) & (ts <= t_end + 1e-12)])
    return tri


def initial_eta(dphi, k: int, q: float, ts) -> float:
    """max_t |R0(t)|_L1 = max|phi'| (2/pi) / (2 pi k c_q)."""
    return float(np.max(np.abs(dphi(ts))) * (2 / pi) / (2 * pi * k * cos_lq_norm(q)))


def shear_triple(n: int, basis: XiBasis, t_start: float, t_end: float, pad: float, dt: float,
                 amplitude: float = 1.0, eps: float = 0.3, speed: float = 1.0, rho_bar: float = 0.3,
                 beta: float = 0.1, j: int = 0) -> Triple:
    """A travelling-wave triple with a single active direction.

    R = g(t, x1) xi_j with g = A (1 + eps cos(2 pi (x1 - v t))), b = (0, beta sin(2 pi x1), 0)
    and rho = rho_bar + (A eps / v)(cos(2 pi (x1 - v t)) - cos(2 pi x1)).
    """
    d = basis.d
    if d != 3:
        raise ParamError("the shear triple is three dimensional")
    xi = basis.xis[j]
    if xi[0] == 0:
        raise ParamError("direction must have a nonzero first component")
    nt = 1 + int(round((t_end - t_start + 2 * pad) / dt))
    ts = (t_start - pad + dt * np.arange(nt)).reshape(nt, 1, 1, 1, 1)
    x1 = (np.arange(n) / n).reshape(1, 1, n, 1, 1)
    phase = 2 * pi * (x1 - speed * ts)
    g = amplitude * (1 + eps * np.cos(phase))
    # d_t rho = -d_x1 g * xi[0]
    rho = rho_bar + xi[0] * (amplitude * eps / speed) * (np.cos(phase) - np.cos(2 * pi * x1))
    full = (n,) * d
    R = np.broadcast_to(np.concatenate([g * xi[c] for c in range(d)], axis=1), (nt, d) + full)
    bvals = np.zeros((1, d, n, 1, 1))
    bvals[0, 1] = beta * np.sin(2 * pi * np.arange(n) / n).reshape(n, 1, 1)
    b = np.broadcast_to(bvals, (nt, d) + full)
    rho = np.broadcast_to(rho, (nt, 1) + full)
    tri = Triple(TimeSeriesField(t_start, t_end, pad, dt, rho), TimeSeriesField(t_start, t_end, pad, dt, b),
                 TimeSeriesField(t_start, t_end, pad, dt, R))
    tri.eta = float(amplitude * np.linalg.norm(xi))
    return tri


# ---------------------------------------------------------------- decomposition


@dataclass
class Decomposition:
    basis: XiBasis
    coefficients: list  # 2d TimeSeriesField scalars, all >= 0

    def reconstruct(self, i: int) -> PeriodicField:
        acc = 0.0
        for j, c in enumerate(self.coefficients):
            acc = acc + self.basis.xis[j].reshape((-1,) + (1,) * self.basis.d) * np.asarray(c.frames[i])
        return PeriodicField(np.broadcast_to(acc, (self.basis.d,) + c.frames[i].shape[1:]))

    def reconstruction_error(self, R: TimeSeriesField, i: int) -> float:
        ref = R.frames[i]
        diff = self.reconstruct(i).data - ref
        return float(np.max(np.abs(diff)) / max(np.max(np.abs(ref)), 1e-300))

    def active(self, tol: float = 1e-12, stride: int = 1) -> list[int]:
        """Directions whose coefficient exceeds tol * max|R| somewhere on the frames."""
        n = self.coefficients[0].n_frames
        peaks = np.zeros(len(self.coefficients))
        for i in range(0, n, stride):
            for j, c in enumerate(self.coefficients):
                peaks[j] = max(peaks[j], float(np.max(c.frames[i])))
        top = peaks.max()
        return [j for j in range(len(peaks)) if top > 0 and peaks[j] > tol * top]

    def peak(self, j: int) -> float:
        c = self.coefficients[j]
        return max(float(np.max(c.frames[i])) for i in range(c.n_frames))


def decompose_error(R: TimeSeriesField, basis: XiBasis) -> Decomposition:
    """Nonnegative coefficients with R = sum_j R^j xi_j; the d x d solve is
    split by sign, a^(j,+) on xi_j and a^(j,-) on xi_(d+j)."""
    d = basis.d
    M = basis.matrix()
    if np.linalg.cond(M) > 2:
        raise StepError("decomposition", f"xi basis is ill-conditioned (cond {np.linalg.cond(M):.3g})")
    Minv = np.linalg.inv(M)
    shape = R.frames.shape[2:]
    cache: dict = {}

    def solve(i):
        if i not in cache:
            if len(cache) > 64:
                cache.pop(next(iter(cache)))
            fr = _compact(np.asarray(R.frames[i]))
            a = np.einsum("ij,j...->i...", Minv, fr)
            cache[i] = a
        return cache[i]

    coefs = []
    for j in range(2 * d):
        c, sign = j % d, (1.0 if j < d else -1.0)

        def fn(i, c=c, sign=sign):
            a = sign * solve(i)[c]
            return np.broadcast_to(np.maximum(a, 0.0)[None], (1,) + shape)

        frames = LazyFrames(fn, R.n_frames, (1,) + shape, cache_size=4)
        coefs.append(TimeSeriesField(R.t_start, R.t_end, R.pad, R.dt, frames))
    return Decomposition(basis, coefs)


# ---------------------------------------------------------------- mollification


class Mollified:
    """Space-time mollification of a series, evaluated lazily at any time in
    its valid span (cubic Hermite between nodes with exact derivatives)."""

    def __init__(self, series: TimeSeriesField, ell: float, spec: MollifierSpec = MollifierSpec(),
                 cache_size: int = 8):
        self.series, self.ell, self.spec = series, ell, spec
        offsets, _ = mollify_time_weights(series.dt, ell, spec)
        self.half = int(offsets[-1])
        self.cache: dict = {}
        self.cache_size = cache_size

    @property
    def span(self) -> tuple[float, float]:
        t = self.series.times
        return float(t[self.half]), float(t[self.series.n_frames - 1 - self.half])

    def _get(self, i: int, derivative: bool) -> PeriodicField:
        key = (i, derivative)
        if key not in self.cache:
            if len(self.cache) >= self.cache_size:
                self.cache.pop(next(iter(self.cache)))
            self.cache[key] = mollified_frame(self.series, i, self.ell, self.spec, derivative=derivative)
        return self.cache[key]

    def value(self, i: int) -> PeriodicField:
        return self._get(i, False)

    def deriv(self, i: int) -> PeriodicField:
        return self._get(i, True)

    def _locate(self, t: float):
        s = self.series
        lo, hi = self.span
        if t < lo - 1e-9 * s.dt or t > hi + 1e-9 * s.dt:
            raise StepError("mollification", f"time {t:.6g} outside the mollified span [{lo:.6g}, {hi:.6g}]")
        x = (t - s.times[0]) / s.dt
        i = int(np.floor(x + 1e-9))
        frac = x - i
        if abs(frac) < 1e-9:
            return i, 0.0
        return i, frac

    def at(self, t: float) -> PeriodicField:
        i, s = self._locate(t)
        if s == 0.0:
            return self.value(i)
        h = hermite_weights(s)
        dt = self.series.dt
        return PeriodicField(h[0] * self.value(i).data + h[1] * dt * self.deriv(i).data
                             + h[2] * self.value(i + 1).data + h[3] * dt * self.deriv(i + 1).data)

    def dt_at(self, t: float) -> PeriodicField:
        i, s = self._locate(t)
        if s == 0.0:
            return self.deriv(i)
        h = hermite_derivative_weights(s)
        dt = self.series.dt
        return PeriodicField(h[0] * self.value(i).data / dt + h[1] * self.deriv(i).data
                             + h[2] * self.value(i + 1).data / dt + h[3] * self.deriv(i + 1).data)


def product_series(a: TimeSeriesField, b: TimeSeriesField) -> TimeSeriesField:
    shape = (b.components,) + b.frames.shape[2:]

    def fn(i):
        return np.broadcast_to(_compact(np.asarray(a.frames[i])) * _compact(np.asarray(b.frames[i])), shape)

    return TimeSeriesField(a.t_start, a.t_end, a.pad, a.dt, LazyFrames(fn, a.n_frames, shape, cache_size=4))


# ---------------------------------------------------------------- configuration and report


@dataclass
class StepConfig:
    dt_out: float
    dt_sub: float
    du: float | None = None
    samples: int = 5
    anchors: list | None = None
    anchor_seed: int = 0
    anchor_attempts: int = 200
    time_corrector: bool = True
    theta_order: int = 8
    cutoff_order: int = 10
    polar_nodes: int = 8
    ray_nodes: int = 24
    active_tol: float = 1e-12
    tol_cde: float = 1e-2
    tol_cancel: float = 1e-2
    mollifier: str = "exp"

    def kernel(self) -> BogovskiiKernel:
        return BogovskiiKernel(ray_nodes=self.ray_nodes, polar_nodes=self.polar_nodes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    params: dict
    config: dict
    window_in: tuple
    window_out: tuple
    pad_out: float
    active: list
    anchors: list
    separation: float | None
    gates: list
    sample_times: list
    error_norms: dict          # term -> max_t |R_i|_L1
    error_traces: dict         # term -> list over sample times
    perturbation_norms: dict
    derivative_norms: dict
    cancellation: dict
    cde: dict
    div_b: float
    mean_drift: float
    split_exactness: float
    ratio: float               # |R~|_{C_t L1} / |R|_{C_t L1}
    constants: dict
    timing: dict

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.as_dict()), indent=2, sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


# ---------------------------------------------------------------- the step


class _Snapshot:
    """Every field of the step at one time, computed on first access."""

    def __init__(self, step: "PerturbationStep", t: float):
        self.step, self.t = step, float(t)

    # ---- block data
    @cached_property
    def blocks(self) -> dict:
        st, t = self.step, self.t
        out = {}
        for j in st.active:
            tr, per = st.trajectories[j], st.periods[j]
            R, Rt, Ru = tr.center_data(t)
            du = float(tr.du_at(t)[0])
            r = float(st.params.radius(max(R[0], 0.0)))
            out[j] = dict(x=tr.position(t)[0], r=r, rdot=float(tr.radius_dot(t)[0]), du=du,
                          tau=float(per(t)[0]), dtau=float(per.derivative(t)[0]),
                          R=float(R[0]), Rt=float(Rt[0]), Ru=float(Ru[0]),
                          fields=moving_blocks(tr.position(t)[0], r, j, st.base, st.params, st.n))
        return out

    @cached_property
    def theta_P(self) -> PeriodicField:
        st = self.step
        acc = PeriodicField.zeros(st.d, st.n)
        for j, b in self.blocks.items():
            acc = acc + b["fields"].theta * (st.cP * b["tau"])
        return acc

    @cached_property
    def W_P(self) -> PeriodicField:
        st = self.step
        pot = np.zeros((st.d,) + (st.n,) * st.d)
        for j, b in self.blocks.items():
            r = b["r"]
            y = block_displacement(b["x"], r, st.n, st.d)
            pot += r ** (1 - st.d / st.params.qp) * st.base.potential(y, j)
        return curl(PeriodicField(pot)) * st.params.sigma

    @cached_property
    def theta_T(self) -> PeriodicField:
        return self.step.theta_T(self.t)

    @cached_property
    def theta_C(self) -> float:
        return -float(self.theta_P.mean()[0] + self.theta_T.mean()[0])

    @cached_property
    def theta(self) -> PeriodicField:
        return self.theta_P + self.theta_T + self.theta_C

    # ---- analytic time derivatives
    @cached_property
    def dtheta_P(self) -> PeriodicField:
        st = self.step
        acc = PeriodicField.zeros(st.d, st.n)
        for j, b in self.blocks.items():
            dth = theta_time_derivative(b["x"], b["r"], b["du"] * st.basis.xis[j], b["rdot"],
                                        st.base, st.params, st.n)
            acc = acc + (b["fields"].theta * b["dtau"] + dth * b["tau"]) * st.cP
        return acc

    @cached_property
    def path(self) -> dict:
        """Per direction: crawl result v_j, average f_j and <psi_j> at this time."""
        return {j: self.step.path_data(j, self.t) for j in self.step.active}

    @cached_property
    def dtheta_T(self) -> PeriodicField:
        st = self.step
        acc = PeriodicField.zeros(st.d, st.n)
        if not st.config.time_corrector:
            return acc
        for j, b in self.blocks.items():
            psi = b["fields"].D * b["Ru"]
            acc = acc + self.path[j]["psi_avg"] - psi * (b["tau"] * b["du"] / st.L)
        return acc

    @cached_property
    def dtheta(self) -> PeriodicField:
        tot = self.dtheta_P + self.dtheta_T
        return tot - float(tot.mean()[0])

    # ---- mollified input
    @cached_property
    def rho_l(self) -> PeriodicField:
        return self.step.mol_rho.at(self.t)

    @cached_property
    def b_l(self) -> PeriodicField:
        return self.step.mol_b.at(self.t)

    @cached_property
    def coef(self) -> dict:
        return {j: self.step.mol_R[j].at(self.t) for j in range(2 * self.step.d)}

    @cached_property
    def dxi_coef(self) -> dict:
        st = self.step
        return {j: directional_derivative(self.coef[j], st.basis.xis[j]) for j in st.active}

    @cached_property
    def div_R_l(self) -> PeriodicField:
        acc = PeriodicField.zeros(self.step.d, self.step.n)
        for j in self.step.active:
            acc = acc + self.dxi_coef[j]
        return acc

    # ---- new fields
    @cached_property
    def rho_new(self) -> PeriodicField:
        return self.rho_l + self.theta

    @cached_property
    def b_new(self) -> PeriodicField:
        return self.b_l + self.W_P

    @cached_property
    def terms(self) -> dict:
        st = self.step
        d, n = st.d, st.n
        zero_v = PeriodicField.zeros(d, n, d)
        # R1: commutator of mollification and product, plus inactive remainder
        R1 = st.mol_rhob.at(self.t) - multiply(self.rho_l, self.b_l)
        for j in range(2 * d):
            if j not in st.active:
                R1 = R1 + PeriodicField(st.basis.xis[j].reshape((d,) + (1,) * d) * self.coef[j].data)
        g2 = PeriodicField.zeros(d, n)
        g3 = PeriodicField.zeros(d, n)
        R4 = zero_v
        R5 = zero_v
        g6 = PeriodicField.zeros(d, n)
        for j, b in self.blocks.items():
            f = b["fields"]
            g2 = g2 + f.theta * (st.cP * b["dtau"])
            g3 = g3 + f.D * (b["tau"] * b["Rt"] / st.L)
            Rdot = b["Rt"] + b["Ru"] * b["du"]
            y = torus_displacement(st.grid, b["x"])
            R4 = R4 + PeriodicField(y * f.D.data) * ((st.params.qp / d) * b["tau"] * Rdot / st.L)
            pj = self.path[j]
            R5 = R5 - improved_antidivergence(self.dxi_coef[j], pj["v"])
            g6 = g6 + multiply(self.dxi_coef[j], pj["average"]) - pj["psi_avg"]
        R2 = -poisson_antidivergence(subtract_mean(g2))
        R3 = -poisson_antidivergence(subtract_mean(g3))
        R6 = poisson_antidivergence(subtract_mean(g6))
        # R7: interactions with the mollified fields, the corrector, and block overlaps
        cross = multiply(self.theta_P, self.W_P)
        for j, b in self.blocks.items():
            f = b["fields"]
            cross = cross - multiply(f.theta, f.w) * (st.cP * b["tau"] * st.params.sigma)
        R7 = -(multiply(self.rho_l, self.W_P) + multiply(self.theta_P, self.b_l)
               + multiply(self.theta_T, self.b_l) + multiply(self.theta_T, self.W_P) + cross)
        return {"R1": R1, "R2": R2, "R3": R3, "R4": R4, "R5": R5, "R6": R6, "R7": R7}

    @cached_property
    def R_new(self) -> PeriodicField:
        acc = None
        for k in TERMS:
            acc = self.terms[k] if acc is None else acc + self.terms[k]
        return acc

    @cached_property
    def diagonal_flux(self) -> PeriodicField:
        st = self.step
        acc = PeriodicField.zeros(st.d, st.n, st.d)
        for j, b in self.blocks.items():
            f = b["fields"]
            acc = acc + multiply(f.theta, f.w) * (st.cP * b["tau"] * st.params.sigma)
        return acc

    def master_residual(self, dtheta: PeriodicField) -> PeriodicField:
        """-div R_l + d_t Theta + div(sum_j Theta_P^j W_P^j) + div(R2 + ... + R6)."""
        tr = self.terms
        inner = tr["R2"] + tr["R3"] + tr["R4"] + tr["R5"] + tr["R6"]
        return -self.div_R_l + dtheta + divergence(self.diagonal_flux) + divergence(inner)


class PerturbationStep:
    def __init__(self, triple: Triple, params: SchemeParams, config: StepConfig):
        self.timing: dict = {}
        tic = time.perf_counter()
        self.triple, self.params, self.config = triple, params, config
        self.d, self.n = triple.dim, triple.grid_size
        d, n = self.d, self.n
        if params.d != d:
            raise StepError("setup", f"params are for d={params.d}, data for d={d}")
        self.basis = make_xi_basis(d, params.lam)
        self.L = self.basis.L
        self.grid = grid(d, n)
        self.cP = params.rbar ** (-d / params.qp) / self.L
        self.base = make_base_blocks(d, self.basis, config.theta_order, config.cutoff_order)
        spec = MollifierSpec()
        try:
            self.dec = decompose_error(triple.R, self.basis)
        except StepError:
            raise
        self.mol_R = {j: Mollified(self.dec.coefficients[j], params.ell, spec, cache_size=4)
                      for j in range(2 * d)}
        self.mol_rho = Mollified(triple.rho, params.ell, spec)
        self.mol_b = Mollified(triple.b, params.ell, spec)
        self.mol_rhob = Mollified(product_series(triple.rho, triple.b), params.ell, spec)
        if params.directions == "all":
            self.active = list(range(2 * d))
        else:
            self.active = self.dec.active(config.active_tol)
        self.timing["decompose"] = time.perf_counter() - tic
        self._plan_windows()
        self._check_gates()
        tic = time.perf_counter()
        self._build_trajectories()
        self.timing["trajectories"] = time.perf_counter() - tic
        tic = time.perf_counter()
        self.crawls = {j: CrawlOperator(self.basis, j, self.anchors[j], n, config.kernel())
                       for j in self.active}
        self.timing["bogovskii"] = time.perf_counter() - tic
        self._snapshots: dict = {}

    # ---- planning
    def _plan_windows(self):
        tri, p, c = self.triple, self.params, self.config
        self.R_max = max([self.dec.peak(j) for j in self.active], default=0.0)
        self.tau_bound = p.tau_bound(self.R_max)
        lo, hi = self.mol_rho.span
        t0, t1 = tri.window
        dto = c.dt_out
        ratio = tri.rho.dt / dto
        if abs(ratio - round(ratio)) > 1e-9:
            raise StepError("setup", "the output step must divide the input step")
        shrink = max(self.tau_bound, 2 * p.ell)
        t1_out = t0 + np.floor((t1 - shrink - t0) / dto + 1e-9) * dto
        if t1_out <= t0:
            raise StepError("setup", f"window exhausted: shrink {shrink:.4g} >= length {t1 - t0:.4g}")
        pad_out = np.floor((tri.rho.pad - p.ell) / dto + 1e-9) * dto
        if pad_out < 0:
            raise StepError("setup", "input padding is smaller than the mollification width")
        # the output pad is limited by the data before t0 and the lookahead after t1
        room = min(t0 - lo, hi - t1_out - 1.02 * self.tau_bound)
        pad_out = min(pad_out, np.floor(room / dto + 1e-9) * dto)
        if pad_out < 0:
            raise StepError("setup", "no room for the lookahead past the output window")
        self.shrink = shrink
        self.t0, self.t1_out, self.pad_out = t0, float(t1_out), float(pad_out)
        self.traj_lo = t0 - pad_out
        self.traj_hi = t1_out + pad_out + 1.02 * self.tau_bound
        if self.traj_hi > hi + 1e-12:
            raise StepError("setup", f"lookahead needs data up to {self.traj_hi:.4g}, mollified span ends at {hi:.4g}")
        self.series_lo, self.series_hi = lo, hi

    def _check_gates(self):
        r_max = float(self.params.radius(self.R_max))
        self.gates = self.params.gates(r_max, self.n)
        failed = [g for g in self.gates if g.enforced and not g.passed]
        if failed:
            raise GateError(failed)

    def _choose_anchors(self) -> tuple[dict, float | None]:
        c = self.config
        if c.anchors is not None:
            pts = np.asarray(c.anchors, dtype=float).reshape(-1, self.d)
            if pts.shape[0] == 1:
                pts = np.repeat(pts, len(self.active), axis=0)
            anchors = {j: pts[k] % 1.0 for k, j in enumerate(self.active)}
        else:
            rng = np.random.default_rng(c.anchor_seed)
            best, best_pts = -1.0, None
            for _ in range(c.anchor_attempts if len(self.active) > 1 else 1):
                pts = rng.random((len(self.active), self.d))
                dist = (min_pairwise_distance(self.basis, pts, tuple(self.active))
                        if len(self.active) > 1 else np.inf)
                if dist > best:
                    best, best_pts = dist, pts
                if dist >= 3 * self.params.radius(self.R_max):
                    break
            anchors = {j: best_pts[k] for k, j in enumerate(self.active)}
        sep = (min_pairwise_distance(self.basis, np.stack([anchors[j] for j in self.active]),
                                     tuple(self.active)) if len(self.active) > 1 else None)
        return anchors, sep

    def _build_trajectories(self):
        p, c = self.params, self.config
        self.anchors, self.separation = self._choose_anchors()
        series = self.triple.rho
        i0 = int(np.floor((self.traj_lo - series.times[0]) / series.dt + 1e-9))
        i1 = int(np.ceil((self.traj_hi - series.times[0]) / series.dt - 1e-9))
        i0 = max(i0, self.mol_rho.half)
        i1 = min(i1, series.n_frames - 1 - self.mol_rho.half)
        self.trajectories: dict = {}
        self.periods: dict = {}
        for j in self.active:
            mol = self.mol_R[j]
            vals, ders = [], []
            for i in range(i0, i1 + 1):
                vals.append(mol.value(i))
                ders.append(mol.deriv(i))
            neg = min(float(v.data.min()) for v in vals)
            if neg < -1e-12:
                raise StepError("radius", f"mollified coefficient {j} is negative ({neg:.3g})")
            ser = OrbitSeries(series.times[i0], series.dt, vals, ders, self.basis, j, self.anchors[j])
            del vals, ders
            tr = integrate_trajectory(j, self.anchors[j], ser, p, self.basis, self.traj_lo,
                                      min(self.traj_hi, ser.t1), c.dt_sub)
            self.trajectories[j] = tr
            self.periods[j] = PeriodFunction(tr)
        rs = [float(np.max(self.trajectories[j].radius(self.trajectories[j].t))) for j in self.active]
        self.r_max_measured = max(rs, default=0.0)
        for j in self.active:
            check_resolution(float(np.min(self.trajectories[j].radius(self.trajectories[j].t))), self.n)

    # ---- path quadratures
    def _du(self) -> float:
        if self.config.du is not None:
            return self.config.du
        return self.params.r_min / 8

    def _u_nodes(self, ua: float, ub: float, breaks=()) -> tuple[np.ndarray, np.ndarray]:
        """Fixed global grid of step du restricted to [ua, ub] plus break points;
        composite trapezoid weights."""
        du = self._du()
        k0, k1 = int(np.ceil(ua / du)), int(np.floor(ub / du))
        nodes = np.concatenate([[ua, ub], np.asarray(breaks, dtype=float), du * np.arange(k0, k1 + 1)])
        nodes = np.unique(nodes[(nodes >= ua) & (nodes <= ub)])
        # drop nodes closer than 1e-12 du to a neighbour
        keep = np.concatenate([[True], np.diff(nodes) > 1e-12 * du])
        nodes = nodes[keep]
        gaps = np.diff(nodes)
        w = np.zeros_like(nodes)
        w[:-1] += gaps / 2
        w[1:] += gaps / 2
        return nodes, w

    def _bumps(self, j: int, u: np.ndarray, s: np.ndarray):
        tr = self.trajectories[j]
        R, Rt, Ru = tr.series.evaluate(s, u)
        radii = 0.5 * self.params.radius(np.maximum(R, 0.0))
        centers = (tr.anchor[None, :] + u[:, None] * tr.xi[None, :]) % 1.0
        return centers, radii, Ru

    def _scatter_D(self, centers, radii, weights) -> PeriodicField:
        prof = self.base.profile
        mass = prof.ball_integral(self.d)
        return scatter_radial(centers, radii, weights / (mass * radii ** self.d), prof, self.d, self.n)

    def _period_nodes(self, j: int, t: float):
        tr = self.trajectories[j]
        ua = float(tr.u_at(t)[0])
        u, w = self._u_nodes(ua, ua + self.L)
        w = w * (self.L / w.sum())
        return u, w, tr.time_of(u)

    def psi_average(self, j: int, t: float) -> PeriodicField:
        """<psi_j>(t): the period average of psi_j along the path, as a u-quadrature."""
        u, w, s = self._period_nodes(j, t)
        centers, radii, Ru = self._bumps(j, u, s)
        return self._scatter_D(centers, radii, w * Ru / self.L)

    def path_data(self, j: int, t: float) -> dict:
        u, w, s = self._period_nodes(j, t)
        centers, radii, Ru = self._bumps(j, u, s)
        crawl = CrawlProfile(u, radii, w, self.base.profile)
        try:
            res = self.crawls[j](crawl)
        except Exception as exc:
            raise StepError("crawl", str(exc)) from exc
        psi = self._scatter_D(centers, radii, w * Ru / self.L)
        return {"v": res.v, "average": res.average, "psi_avg": psi, "crawl_residual": res.residual}

    def theta_T_rate(self, t: float) -> PeriodicField:
        """d/dt Theta_T = sum_j (<psi_j> - tau_j u_j' psi_j / L)."""
        acc = PeriodicField.zeros(self.d, self.n)
        for j in self.active:
            tr, per = self.trajectories[j], self.periods[j]
            R, Rt, Ru = tr.center_data(t)
            r = float(self.params.radius(max(R[0], 0.0)))
            D = moving_blocks(tr.position(t)[0], r, j, self.base, self.params, self.n).D
            acc = acc + self.psi_average(j, t) - D * (float(Ru[0]) * float(per(t)[0]) * float(tr.du_at(t)[0]) / self.L)
        return acc

    def theta_T_direct(self, t: float, nodes: int = 257) -> PeriodicField:
        """Theta_T(t) from its defining time integral (Simpson rule); slow, for checks."""
        if nodes % 2 == 0:
            nodes += 1
        ts = np.linspace(self.t0, t, nodes)
        w = np.ones(nodes)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        w *= (t - self.t0) / (3 * (nodes - 1))
        acc = PeriodicField.zeros(self.d, self.n)
        for tk, wk in zip(ts, w):
            acc = acc + self.theta_T_rate(float(tk)) * float(wk)
        return acc

    def theta_T(self, t: float) -> PeriodicField:
        """int_{t0}^t sum_j (<psi_j> - tau_j u_j' psi_j / L) ds, rewritten as one
        weighted path integral per direction (order of integration exchanged)."""
        out = PeriodicField.zeros(self.d, self.n)
        if not self.config.time_corrector or abs(t - self.t0) < 1e-15:
            return out
        lo, hi = min(self.t0, t), max(self.t0, t)
        sgn = 1.0 if t >= self.t0 else -1.0
        for j in self.active:
            tr, per = self.trajectories[j], self.periods[j]
            tau_lo, tau_hi = float(per(lo)[0]), float(per(hi)[0])
            cuts = np.unique([lo, hi, lo + tau_lo, hi + tau_hi])
            u_cuts = tr.u_at(cuts)
            u_start = u_cuts[0]
            us, ws, wts = [], [], []
            # the weight jumps at lo and hi and has kinks at the other cuts, so
            # each piece gets its own nodes and one-sided values
            for a, b, ua, ub in zip(cuts[:-1], cuts[1:], u_cuts[:-1], u_cuts[1:]):
                u, w = self._u_nodes(ua, ub)
                s = np.clip(tr.time_of(u), a, b)
                s[0], s[-1] = a, b
                mid = 0.5 * (a + b)
                zeta = np.full_like(s, lo)
                if mid > lo + tau_lo:
                    zeta = tr.time_of(np.maximum(u - self.L, u_start))
                meas = np.maximum(0.0, np.minimum(s, hi) - np.maximum(zeta, lo))
                if lo <= mid <= hi:
                    meas = meas - per(s)
                us.append(u)
                ws.append(w)
                wts.append(sgn * meas)
            u, w, weight = np.concatenate(us), np.concatenate(ws), np.concatenate(wts)
            s = tr.time_of(u)
            centers, radii, Ru = self._bumps(j, u, s)
            out = out + self._scatter_D(centers, radii, w * weight * Ru / self.L)
        return out

    # ---- snapshots
    def snapshot(self, t: float) -> _Snapshot:
        key = round(t / self.config.dt_out * 8)  # times on a 1/8 sub-grid of dt_out
        if key not in self._snapshots:
            if len(self._snapshots) > 24:
                self._snapshots.pop(next(iter(self._snapshots)))
            self._snapshots[key] = _Snapshot(self, t)
        return self._snapshots[key]

    def output_triple(self) -> Triple:
        dto = self.config.dt_out
        count = 1 + int(round((self.t1_out - self.t0 + 2 * self.pad_out) / dto))
        start = self.t0 - self.pad_out
        d, n = self.d, self.n

        def make(attr, comps):
            def fn(i):
                return getattr(self.snapshot(start + i * dto), attr).data
            return TimeSeriesField(self.t0, self.t1_out, self.pad_out, dto,
                                   LazyFrames(fn, count, (comps,) + (n,) * d, cache_size=96))

        out = Triple(make("rho_new", 1), make("b_new", d), make("R_new", d), phi=self.triple.phi)
        return out

    # ---- diagnostics
    def sample_times(self) -> list[float]:
        dti = self.triple.rho.dt
        k = max(1, self.config.samples)
        ts = np.linspace(self.t0, self.t1_out, k + 2)[1:-1] if k > 1 else [0.5 * (self.t0 + self.t1_out)]
        base = self.triple.rho.times[0]
        return [float(self.triple.rho.times[int(np.round((t - base) / dti))]) for t in ts]

    def theta_at(self, t: float) -> PeriodicField:
        return self.snapshot(t).theta

    def fd_derivative(self, t: float, h: float) -> PeriodicField:
        return (self.theta_at(t + h) - self.theta_at(t - h)) * (1 / (2 * h))

    def master_identity(self, t: float) -> dict:
        snap = self.snapshot(t)
        h = self.config.dt_out
        spatial = lp_norm(snap.master_residual(snap.dtheta), 1)
        fd = {}
        for hh in (h, h / 2):
            fd[hh] = lp_norm(self.fd_derivative(t, hh) - snap.dtheta, 1)
        total = lp_norm(snap.master_residual(self.fd_derivative(t, h)), 1)
        third = (self.theta_at(t + 2 * h) - self.theta_at(t + h) * 2 + self.theta_at(t - h) * 2
                 - self.theta_at(t - 2 * h)) * (1 / (2 * h**3))
        return {"t": t, "spatial": spatial, "fd": fd[h], "fd_half": fd[h / 2], "total": total,
                "div_R_l": lp_norm(snap.div_R_l, 1), "scale": lp_norm(third, 1),
                "dtheta": lp_norm(snap.dtheta, 1)}

    def report(self, with_master: bool = True) -> StepReport:
        tic = time.perf_counter()
        p, c = self.params, self.config
        times = self.sample_times()
        traces = {k: [] for k in TERMS}
        pert = {"Theta_P_Lq": [], "Theta_T_Lq": [], "Theta_C_abs": [], "W_P_W1p": [],
                "Theta_P_L1": [], "Theta_T_L1": [], "W_P_L1": []}
        deriv = {"grad_rho_Lq": [], "dt_rho_Lq": [], "b_W1p": [], "grad_b_W1p": []}
        master, cde, divb, drift, split, ratio_num, ratio_den, crawl_res = [], [], [], [], [], [], [], []
        h = c.dt_out
        for t in times:
            snap = self.snapshot(t)
            for k in TERMS:
                traces[k].append(lp_norm(snap.terms[k], 1))
            pert["Theta_P_Lq"].append(lp_norm(snap.theta_P, p.q))
            pert["Theta_T_Lq"].append(lp_norm(snap.theta_T, p.q))
            pert["Theta_C_abs"].append(abs(snap.theta_C))
            pert["W_P_W1p"].append(sobolev_norm(snap.W_P, 1, p.p_eff))
            pert["Theta_P_L1"].append(lp_norm(snap.theta_P, 1))
            pert["Theta_T_L1"].append(lp_norm(snap.theta_T, 1))
            pert["W_P_L1"].append(lp_norm(snap.W_P, 1))
            total = snap.R_new
            summed = snap.terms["R1"]
            for k in TERMS[1:]:
                summed = summed + snap.terms[k]
            split.append(float(np.max(np.abs(total.data - summed.data))))
            # new-triple equation, centred differences in time
            drho = (self.snapshot(t + h).rho_new - self.snapshot(t - h).rho_new) * (1 / (2 * h))
            flux = multiply(snap.rho_new, snap.b_new)
            res = drho + divergence(flux) + divergence(snap.R_new)
            cde.append((lp_norm(res, 1), lp_norm(divergence(snap.R_new), 1)))
            divb.append(lp_norm(divergence(snap.b_new), 2))
            i = self.triple.rho.index_of(t)
            drift.append(abs(float(snap.rho_new.mean()[0]) - float(self.triple.rho.frame(i).mean()[0])))
            ratio_num.append(lp_norm(snap.R_new, 1))
            ratio_den.append(lp_norm(self.triple.R.frame(i), 1))
            deriv["grad_rho_Lq"].append(lp_norm(gradient(snap.rho_new), p.q))
            deriv["dt_rho_Lq"].append(lp_norm(drho, p.q))
            deriv["b_W1p"].append(sobolev_norm(snap.b_new, 1, p.p_eff))
            deriv["grad_b_W1p"].append(sum(sobolev_norm(gradient(snap.b_new.scalar(a)), 1, p.p_eff)
                                           for a in range(self.d)))
            crawl_res.append(max([snap.path[j]["crawl_residual"] for j in self.active], default=0.0))
            if with_master:
                master.append(self.master_identity(t))
        cancel = {}
        if master:
            div_scale = max(m["div_R_l"] for m in master)
            scale = max(m["scale"] for m in master)
            bound = max(c.tol_cancel * div_scale, 10 * h**2 * scale)
            cancel = {"per_time": master, "spatial": max(m["spatial"] for m in master),
                      "fd": max(m["fd"] for m in master), "fd_half": max(m["fd_half"] for m in master),
                      "total": max(m["total"] for m in master), "div_R_l": div_scale,
                      "scale": scale, "bound": bound,
                      "fd_reduction": max(m["fd"] for m in master) / max(max(m["fd_half"] for m in master), 1e-300)}
        tol_eff = c.tol_cde + (cancel["total"] / max(cancel["div_R_l"], 1e-300) if cancel else 0.0)
        cde_rel = [r / max(dr, 1e-300) for r, dr in cde]
        constants = {"crawl_residual": max(crawl_res, default=0.0),
                     "r_max": self.r_max_measured, "r_min": p.r_min, "tau_bound": self.tau_bound}
        for j in self.active:
            tr, per = self.trajectories[j], self.periods[j]
            lo, hi = per.domain
            ts = np.linspace(lo, hi, 64)
            taus = per(ts)
            constants[f"tau_bracket_{j}"] = float(np.max(taus) / p.tau_floor())
            constants[f"tau_min_ratio_{j}"] = float(np.min(taus) / p.tau_floor())
            constants[f"dtau_max_{j}"] = float(np.max(np.abs(per.derivative(ts))))
            speed = tr.speed(tr.t)
            constants[f"speed_lower_{j}"] = float(np.min(speed) / (p.rbar ** (-p.d / p.qp) * p.ell**p.d
                                                                  * p.sigma / p.eta))
        self.timing["report"] = time.perf_counter() - tic
        err_max = {k: max(v) for k, v in traces.items()}
        return StepReport(
            params=p.as_dict(), config=c.as_dict(), window_in=self.triple.window,
            window_out=(self.t0, self.t1_out), pad_out=self.pad_out, active=list(self.active),
            anchors=[self.anchors[j].tolist() for j in self.active], separation=self.separation,
            gates=[g.as_dict() for g in self.gates], sample_times=times, error_norms=err_max,
            error_traces=traces, perturbation_norms={k: max(v) for k, v in pert.items()},
            derivative_norms={k: max(v) for k, v in deriv.items()},
            cancellation=cancel,
            cde={"residual": max(r for r, _ in cde), "relative": max(cde_rel), "tol": tol_eff,
                 "passed": bool(max(cde_rel) <= tol_eff)},
            div_b=max(divb), mean_drift=max(drift), split_exactness=max(split),
            ratio=max(ratio_num) / max(max(ratio_den), 1e-300),
            constants=constants, timing=dict(self.timing))


def perturbation_step(triple: Triple, params: SchemeParams, config: StepConfig,
                      with_master: bool = True) -> tuple[Triple, StepReport, PerturbationStep]:
    step = PerturbationStep(triple, params, config)
    out = step.output_triple()
    rep = step.report(with_master=with_master)
    out.eta = max(lp_norm(step.snapshot(t).R_new, 1) for t in rep.sample_times)
    return out, rep, step


# ---------------------------------------------------------------- iteration


@dataclass
class IterationReport:
    steps: list
    rho_increments: list      # max_t |rho_{k+1} - rho_k|_{L^q}
    b_increments: list        # max_t |b_{k+1} - b_k|_{W^{1,p}}
    energy_error: list        # max_t | |rho_k(t)|_{L^q} - phi(t) | after each step
    windows: list

    def to_json(self) -> str:
        return json.dumps(_jsonable({"steps": [s.as_dict() for s in self.steps],
                                     "rho_increments": self.rho_increments,
                                     "b_increments": self.b_increments,
                                     "energy_error": self.energy_error,
                                     "windows": self.windows}), indent=2, sort_keys=True)


def coarsen(series: TimeSeriesField, dt_new: float) -> TimeSeriesField:
    """Every k-th frame, trimming the window and pad to the coarse grid."""
    k = dt_new / series.dt
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise FieldError("the coarse step must be a multiple of the series step")
    k = int(round(k))
    pad = np.floor(series.pad / dt_new + 1e-9) * dt_new
    length = np.floor((series.t_end - series.t_start) / dt_new + 1e-9) * dt_new
    s = int(round((series.pad - pad) / series.dt))
    count = 1 + int(round((length + 2 * pad) / dt_new))
    frames = series.frames[s: s + (count - 1) * k + 1: k]
    return TimeSeriesField(series.t_start, series.t_start + length, pad, dt_new, frames)


def iterate(t0: Triple, schedule: list, n_steps: int, dt_in: list | None = None,
            with_master: bool = False) -> tuple[Triple, IterationReport]:
    """Apply ``n_steps`` perturbation steps; ``schedule[k] = (params, config)``."""
    if n_steps < 1:
        raise ParamError("n must be at least 1")
    if len(schedule) < n_steps:
        raise ParamError("schedule is shorter than the number of steps")
    tri = t0
    reports, drho, db, energy, windows = [], [], [], [], []
    for k in range(n_steps):
        params, config = schedule[k]
        if k > 0 and dt_in is not None:
            tri = Triple(coarsen(tri.rho, dt_in[k]), coarsen(tri.b, dt_in[k]),
                         coarsen(tri.R, dt_in[k]), tri.eta, tri.phi)
        new, rep, step = perturbation_step(tri, params, config, with_master=with_master)
        qs, ps = params.q, params.p_eff
        inc_r, inc_b, en = [], [], []
        for t in rep.sample_times:
            snap = step.snapshot(t)
            i = tri.rho.index_of(t)
            inc_r.append(lp_norm(snap.rho_new - tri.rho.frame(i), qs))
            inc_b.append(sobolev_norm(snap.b_new - tri.b.frame(i), 1, ps))
            if tri.phi is not None:
                en.append(abs(lp_norm(snap.rho_new, qs) - float(tri.phi(t))))
        reports.append(rep)
        drho.append(max(inc_r))
        db.append(max(inc_b))
        energy.append(max(en) if en else None)
        windows.append(new.window)
        if new.window[1] <= new.window[0]:
            raise StepError("iterate", "window exhausted")
        tri = new
    return tri, IterationReport(reports, drho, db, energy, windows)


# ---------------------------------------------------------------- named stages


def principal_perturbations(step: PerturbationStep, t: float) -> tuple[PeriodicField, PeriodicField]:
    snap = step.snapshot(t)
    return snap.theta_P, snap.W_P


def time_corrector(step: PerturbationStep, t: float) -> dict:
    """Theta_T(t) with the intermediates psi_j(t) and <psi_j>(t)."""
    snap = step.snapshot(t)
    psi = {j: b["fields"].D * b["Ru"] for j, b in snap.blocks.items()}
    avg = {j: step.psi_average(j, t) for j in step.active}
    return {"theta_T": snap.theta_T, "psi": psi, "psi_avg": avg}


def space_corrector(theta_P: PeriodicField, theta_T: PeriodicField) -> float:
    return -float(theta_P.mean()[0] + theta_T.mean()[0])


def assemble_new_error(step: PerturbationStep, t: float) -> tuple[PeriodicField, dict]:
    snap = step.snapshot(t)
    return snap.R_new, dict(snap.terms)
