"""Numerical checks of the geometric and analytic lemmas behind the scheme.

Each suite returns a :class:`SuiteResult` holding named checks with their
measured value and bound, plus the measured constants.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .antidiv import (BogovskiiKernel, CrawlOperator, bogovskii, improved_antidivergence,
                      uniform_crawl)
from .blocks import (OrbitSeries, SchemeParams, cancellation_residual, integrate_trajectory,
                     make_base_blocks, moving_blocks, period_function)
from .bumps import Profile
from .fields import (PeriodicField, divergence, gradient, grid, lp_norm, poisson_antidivergence,
                     resample, subtract_mean, truncate)
from .geometry import (make_xi_basis, partition_of_unity, path_average, segment_spacing,
                       torus_displacement, trace_field)


@dataclass
class Check:
    name: str
    value: float
    bound: float
    relation: str = "<="

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.value):
            return False
        return bool(self.value <= self.bound if self.relation == "<=" else self.value >= self.bound)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name}: {self.value:.4g} {self.relation} {self.bound:.4g}"


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    measured: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, value, bound, relation="<="):
        self.checks.append(Check(name, float(value), float(bound), relation))

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "elapsed": self.elapsed,
                "measured": self.measured,
                "checks": [dict(asdict(c), passed=c.passed) for c in self.checks]}


def _timed(fn):
    def wrapper(*args, **kwargs):
        tic = time.perf_counter()
        res = fn(*args, **kwargs)
        res.elapsed = time.perf_counter() - tic
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- path periodicity


@_timed
def partition_suite(lams=(4, 8), n: int | None = None, points: int = 100, seed: int = 0,
                    tol: float = 1e-3) -> SuiteResult:
    """Path average of the orbit partition of unity is one everywhere.

    The grid (default 16 lambda points) only carries the normalizer; U itself
    is evaluated pointwise.
    """
    res = SuiteResult("partition")
    rng = np.random.default_rng(seed)
    for lam in lams:
        basis = make_xi_basis(3, lam)
        pu = partition_of_unity(basis, 0, rng.random(3), n or 16 * lam)
        xs = rng.random((points, 3))
        M = max(4096, 64 * basis.L)
        errs = [abs(path_average(pu, basis, 0, x, M=M) - 1.0) for x in xs]
        res.add(f"path average of U minus 1, lambda={lam}", max(errs), tol)
        res.add(f"integral of U minus 1, lambda={lam}", abs(float(pu.u_grid.mean()[0]) - 1.0), 1e-6)
        res.measured[f"c_lambda{lam}"] = pu.c
        res.measured[f"min_normalizer_lambda{lam}"] = pu.min_normalizer
    return res


def _tent_family(count: int, rng) -> list:
    """Lipschitz cones 1 - |x - c|/w (clipped at 0): Lip = 1/w, mean = pi w^3 / 3."""
    fam = []
    for _ in range(count):
        c, w = rng.random(3), rng.uniform(0.15, 0.4)

        def f(p, c=c, w=w):
            y = p - c[None, :]
            y -= np.round(y)
            return np.maximum(0.0, 1.0 - np.linalg.norm(y, axis=1) / w)

        fam.append((f, 1.0 / w, np.pi * w**3 / 3))
    return fam


@_timed
def path_defect_suite(lams=(4, 8), functions: int = 10, anchors: int = 16, seed: int = 0,
                      drop: float = 1.8) -> SuiteResult:
    """|path average - integral| <= C Lip(f) / lambda with C frozen at the first lambda."""
    res = SuiteResult("path-defect")
    rng = np.random.default_rng(seed)
    fam = _tent_family(functions, rng)
    pts = rng.random((anchors, 3))
    defects = {}
    for lam in lams:
        basis = make_xi_basis(3, lam)
        M = max(8192, 128 * basis.L)
        defects[lam] = np.array([[abs(path_average(f, basis, j, x, M=M) - mean)
                                  for j in range(3) for x in pts] for f, _, mean in fam]).max(axis=1)
    lips = np.array([lip for _, lip, _ in fam])
    lam0 = lams[0]
    C = float(np.max(defects[lam0] * lam0 / lips))
    res.measured["C"] = C
    for lam in lams[1:]:
        res.add(f"max defect / (C Lip / lambda), lambda={lam}", float(np.max(defects[lam] * lam / (C * lips))), 1.0)
        ratio = float(defects[lam0].max() / max(defects[lam].max(), 1e-300))
        res.add(f"defect drop lambda {lam0} -> {lam}", ratio, drop, ">=")
        res.measured[f"max_defect_lambda{lam}"] = float(defects[lam].max())
    res.measured[f"max_defect_lambda{lam0}"] = float(defects[lam0].max())
    return res


@_timed
def trace_suite(lam: int = 4, n: int = 64, profiles: int = 20, seed: int = 0,
                exponents=(1.0, 2.0, np.inf)) -> SuiteResult:
    """Trace norms against c lambda^((d-1)/s) r_max^((d-1+s)/s) r_min^-d, c frozen on constant r."""
    res = SuiteResult("trace")
    d = 3
    basis = make_xi_basis(d, lam)
    spacing = segment_spacing(basis, 0)
    anchor = np.array([0.1, 0.2, 0.3])
    r0 = 0.35 * spacing

    def bound(s, rmin, rmax):
        if np.isinf(s):
            return rmax * rmin ** (-d)
        return lam ** ((d - 1) / s) * rmax ** ((d - 1 + s) / s) * rmin ** (-d)

    const = trace_field(lambda u: np.full_like(u, r0), basis, 0, anchor, n)
    C = {s: lp_norm(const, s) / bound(s, r0, r0) for s in exponents}
    res.measured["c"] = {str(s): v for s, v in C.items()}
    res.measured["strand_spacing"] = spacing
    rng = np.random.default_rng(seed)
    worst = {s: 0.0 for s in exponents}
    for _ in range(profiles):
        k = int(rng.integers(1, 4))
        a = rng.uniform(0.1, 0.4)
        ph = rng.uniform(0, 2 * np.pi)
        rmid = rng.uniform(0.28, 0.36) * spacing

        def prof(u, k=k, a=a, ph=ph, rmid=rmid):
            return rmid * (1 + a * np.sin(2 * np.pi * k * u / basis.L + ph))

        uu = np.linspace(0, basis.L, 4097)
        rr = prof(uu)
        tr = trace_field(prof, basis, 0, anchor, n)
        for s in exponents:
            worst[s] = max(worst[s], lp_norm(tr, s) / (C[s] * bound(s, rr.min(), rr.max())))
    for s in exponents:
        res.add(f"trace norm / frozen bound, s={s}", worst[s], 1.0)
    return res


@_timed
def crawl_suite(lams=(4, 8), n: int = 64, nodes_per_unit: int = 50, polar_nodes: int = 8,
                order: int = 4, tol: float = 1e-2, drop: float = 1.8) -> SuiteResult:
    """div v = average of the crawled bumps - 1, and |v|_L1 ~ 1/lambda."""
    res = SuiteResult("crawl")
    norms = {}
    for lam in lams:
        basis = make_xi_basis(3, lam)
        op = CrawlOperator(basis, 0, [0.1, 0.2, 0.3], n, BogovskiiKernel(polar_nodes=polar_nodes))
        crawl = uniform_crawl(basis, 0.5 / lam, nodes_per_unit * basis.L, profile=Profile("poly", order))
        out = op(crawl)
        norms[lam] = lp_norm(out.v, 1)
        res.add(f"divergence identity residual, lambda={lam}", out.residual, tol)
        res.measured[f"v_L1_lambda{lam}"] = norms[lam]
        res.measured[f"c_lambda{lam}"] = op.pu.c
    for a, b in zip(lams[:-1], lams[1:]):
        res.add(f"|v|_L1 drop lambda {a} -> {b}", norms[a] / norms[b], drop, ">=")
    return res


# ---------------------------------------------------------------- anti-divergences


def _dipole(r: float, order: int = 4):
    a = np.array([r / 2, 0.0, 0.0])
    prof = Profile("poly", order)
    mass = prof.ball_integral(3) * (r / 2) ** 3

    def g(y):
        s1 = np.linalg.norm(y - a, axis=-1) / (r / 2)
        s2 = np.linalg.norm(y + a, axis=-1) / (r / 2)
        return (prof(s1) - prof(s2)) / mass

    return g


@_timed
def antidiv_suite(n: int = 64, seed: int = 0, radii=(0.25, 0.125)) -> SuiteResult:
    res = SuiteResult("antidiv")
    rng = np.random.default_rng(seed)
    m = n // 2
    g = truncate(resample(PeriodicField(rng.standard_normal((1, m, m, m))), n), m)
    g = subtract_mean(resample(g, n))
    err = lp_norm(divergence(poisson_antidivergence(g)) - g, np.inf) / lp_norm(g, np.inf)
    res.add("div grad inverse Laplacian = id - mean", err, 1e-8)
    x = grid(3, n)
    f = PeriodicField((np.cos(2 * np.pi * x[0]) * np.sin(2 * np.pi * (x[1] + 2 * x[2])) + 0.5)[None])
    v = PeriodicField(np.stack([np.sin(2 * np.pi * (3 * x[0] - x[2])), np.cos(2 * np.pi * (2 * x[1] + x[0])),
                                np.sin(2 * np.pi * (x[0] + x[2]))]))
    Rf = improved_antidivergence(f, v)
    fd = PeriodicField(f.data * divergence(v).data)
    target = fd - float(fd.mean()[0])
    err = lp_norm(divergence(Rf) - target, np.inf) / max(lp_norm(target, np.inf), 1e-300)
    res.add("improved anti-divergence identity", err, 1e-8)
    centre = np.array([0.5, 0.5, 0.5])
    X = np.moveaxis(x, 0, -1)
    norms = []
    for r in radii:
        gd = _dipole(r)
        vb = bogovskii(gd, r, centre, n, kernel=BogovskiiKernel(Profile("poly", 4), 16, 16))
        gv = PeriodicField(gd(X - centre)[None])
        resid = lp_norm(divergence(vb) - gv, 1) / lp_norm(gv, 1)
        if r == radii[0]:
            res.add(f"Bogovskii divergence residual, r={r}", resid, 1e-2)
        res.measured[f"bogovskii_residual_r{r}"] = resid
        norms.append(lp_norm(vb, 1))
        res.measured[f"bogovskii_L1_r{r}"] = norms[-1]
    ratio = (norms[0] / norms[1]) / (radii[0] / radii[1])
    res.add("Bogovskii L1 scaling, |ratio / linear - 1|", abs(ratio - 1), 0.1)
    return res


# ---------------------------------------------------------------- blocks and trajectories


def _norm_k(f: PeriodicField, k: int, s: float) -> float:
    if k == 0:
        return lp_norm(f, s)
    acc = 0.0
    for c in range(f.components):
        g = gradient(f.scalar(c))
        acc += lp_norm(PeriodicField(np.sqrt(np.sum(g.data**2, axis=0))[None]), s) ** (1 if np.isinf(s) else s)
    return acc if np.isinf(s) else acc ** (1 / s)


@_timed
def blocks_suite(n: int = 64, radii=(0.3, 0.45), tol: float = 1e-2, q: float = 2.0) -> SuiteResult:
    """r-power scaling of the block norms and the exact block integrals."""
    res = SuiteResult("blocks")
    d = 3
    basis = make_xi_basis(d, 4)
    base = make_base_blocks(d, basis)
    params = SchemeParams(eta=1.0, rbar=0.2, lam=4, ell=0.05, sigma=1.0, q=q)
    qp = params.qp
    centre = np.array([0.5, 0.5, 0.5])
    blk = {r: moving_blocks(centre, r, 0, base, params, n) for r in radii}
    r1, r2 = radii
    worst = 0.0
    for k in (0, 1):
        for s in (1.0, q, qp, np.inf):
            for name, expo in (("theta", -d / q - k + (0 if np.isinf(s) else d / s)),
                               ("w", -d / qp - k + (0 if np.isinf(s) else d / s))):
                a = _norm_k(getattr(blk[r1], name), k, s)
                b = _norm_k(getattr(blk[r2], name), k, s)
                err = abs((b / a) / (r2 / r1) ** expo - 1)
                worst = max(worst, err)
                res.measured[f"{name}_k{k}_s{s}"] = err
    res.add("block norm r-power scaling, worst relative error", worst, tol)
    b = blk[r1]
    iw = (b.theta.data * b.w.data).reshape(d, -1).mean(axis=1)
    res.add("|int theta w - xi|", float(np.max(np.abs(iw - basis.xis[0]))), 1e-6)
    res.add("|div w|_L2", lp_norm(divergence(b.w), 2), 1e-8)
    res.add("|int D - 1|", abs(float(b.D.mean()[0]) - 1), 1e-6)
    return res


@_timed
def trajectory_suite(n: int = 32, seed: int = 0, samples: int = 20) -> SuiteResult:
    res = SuiteResult("trajectory")
    d = 3
    basis = make_xi_basis(d, 4)
    params = SchemeParams(eta=1.0, rbar=0.24, lam=4, ell=0.05, sigma=16.0)
    anchor = [0.1, 0.2, 0.3]
    ser = OrbitSeries.constant(0.0, 0.0, 1.0, basis, 0, anchor)
    tr = integrate_trajectory(0, anchor, ser, params, basis, 0.0, 1.0, 1e-3)
    exact = params.speed_scale / params.eta * tr.t
    res.add("constant case |u - closed form|", float(np.max(np.abs(tr.u - exact))), 1e-10)
    per = period_function(tr)
    res.add("constant case |tau - closed form| / tau", abs(float(per(0.3)[0]) / params.tau_floor() - 1), 1e-10)
    rng = np.random.default_rng(seed)
    a, b_, k = rng.uniform(0.2, 0.4), rng.uniform(0.05, 0.15), rng.integers(1, 3)
    x = grid(d, n)
    dt = 1 / 256

    def fr(t):
        return PeriodicField((0.5 + a * np.cos(2 * np.pi * (k * x[0] - t)) + b_ * np.sin(2 * np.pi * (x[1] + x[2])))[None])

    def dfr(t):
        return PeriodicField((a * 2 * np.pi * np.sin(2 * np.pi * (k * x[0] - t)))[None])

    ts = np.arange(0, 1 + 1e-12, dt)
    ser = OrbitSeries(0.0, dt, [fr(t) for t in ts], [dfr(t) for t in ts], basis, 0, anchor)
    tr = integrate_trajectory(0, anchor, ser, params, basis, 0.0, 1.0, 1e-4)
    per = period_function(tr)
    lo, hi = per.domain
    tt = rng.uniform(lo, hi, samples)
    ident = np.max(np.abs(tr.u_at(tt + per(tt)) - tr.u_at(tt) - basis.L))
    res.add("period identity |u(t+tau) - u(t) - L| / L", float(ident) / basis.L, 1e-8)
    taus = per(tt)
    res.measured["tau_over_floor"] = [float(taus.min() / params.tau_floor()), float(taus.max() / params.tau_floor())]
    base = make_base_blocks(d, basis)
    rel, _ = cancellation_residual(tr, base, params, 0.5 * (lo + hi), 64, 2.5e-5)
    res.add("block cancellation identity (relative L1)", rel, 1e-2)
    return res


SUITES = {
    "partition": partition_suite,
    "path-defect": path_defect_suite,
    "trace": trace_suite,
    "crawl": crawl_suite,
    "antidiv": antidiv_suite,
    "blocks": blocks_suite,
    "trajectory": trajectory_suite,
}

GROUPS = {
    "path-periodicity": ("partition", "path-defect", "trace", "crawl"),
    "analysis": ("antidiv",),
    "blocks": ("blocks", "trajectory"),
    "all": tuple(SUITES),
}


def run_suites(name: str, **kwargs) -> list[SuiteResult]:
    names = GROUPS.get(name, (name,))
    out = []
    for s in names:
        if s not in SUITES:
            raise KeyError(f"unknown suite {s!r}; choose from {sorted(set(SUITES) | set(GROUPS))}")
        out.append(SUITES[s](**kwargs.get(s, {})))
    return out
