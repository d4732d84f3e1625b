"""Periodic fields on the unit torus and their spectral calculus.

A field is stored as samples on the uniform lattice (i/N) per axis, with the
component axis first: shape (C, N, ..., N).  Samples are read as a
trigonometric polynomial, so derivatives, the inverse Laplacian and off-grid
evaluation are all exact for band-limited data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .bumps import Profile

_WORKERS = 1


def set_threads(n: int) -> None:
    """Worker count for the FFTs.  Results do not depend on it."""
    global _WORKERS
    _WORKERS = max(1, int(n))


class FieldError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PeriodicField:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim < 3:
            raise FieldError("data must have shape (components, N, ..., N) with d >= 2")
        shape = data.shape[1:]
        n = shape[0]
        if any(s != n for s in shape):
            raise FieldError(f"all axes must share the grid size, got {shape}")
        if n < 2 or n & (n - 1):
            raise FieldError(f"grid size must be a power of two, got {n}")
        if data.shape[0] not in (1, len(shape)):
            raise FieldError(f"components must be 1 or d={len(shape)}, got {data.shape[0]}")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.ndim - 1

    @property
    def grid_size(self) -> int:
        return self.data.shape[1]

    @property
    def components(self) -> int:
        return self.data.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.components == 1

    @classmethod
    def zeros(cls, dim: int, n: int, components: int = 1) -> "PeriodicField":
        return cls(np.zeros((components,) + (n,) * dim))

    @classmethod
    def from_function(cls, func: Callable, dim: int, n: int) -> "PeriodicField":
        """Sample ``func(x)`` where x has shape (d, N, ..., N)."""
        vals = np.asarray(func(grid(dim, n)), dtype=float)
        if vals.ndim == dim:
            vals = vals[None]
        return cls(np.broadcast_to(vals, vals.shape).copy())

    def scalar(self, i: int) -> "PeriodicField":
        return PeriodicField(self.data[i:i + 1])

    def mean(self) -> np.ndarray:
        return self.data.reshape(self.components, -1).mean(axis=1)

    def pointwise_norm(self) -> np.ndarray:
        if self.is_scalar:
            return np.abs(self.data[0])
        return np.sqrt(np.sum(self.data**2, axis=0))

    def is_mean_zero(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.mean()) <= tol))

    def is_divergence_free(self, tol: float = 1e-8) -> bool:
        div = lp_norm(divergence(self), 2)
        return div <= tol * max(sobolev_norm(self, 1, 2), np.finfo(float).tiny)

    def __add__(self, other):
        if isinstance(other, PeriodicField):
            return PeriodicField(self.data + other.data)
        return PeriodicField(self.data + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, PeriodicField):
            return PeriodicField(self.data - other.data)
        return PeriodicField(self.data - other)

    def __neg__(self):
        return PeriodicField(-self.data)

    def __mul__(self, c):
        if isinstance(c, PeriodicField):
            raise TypeError("use multiply() for products of fields")
        return PeriodicField(self.data * c)

    __rmul__ = __mul__


def grid(dim: int, n: int) -> np.ndarray:
    x = np.arange(n) / n
    return np.stack(np.meshgrid(*([x] * dim), indexing="ij"))


@lru_cache(maxsize=32)
def _wavenumbers(dim: int, n: int):
    """Integer wavenumbers for an rfftn layout, plus derivative versions
    with the Nyquist mode removed."""
    full = np.fft.fftfreq(n, 1.0 / n)
    half = np.arange(n // 2 + 1, dtype=float)
    ks, kd = [], []
    for axis in range(dim):
        k = half if axis == dim - 1 else full
        shape = [1] * dim
        shape[axis] = k.size
        ks.append(k.reshape(shape))
        kn = k.copy()
        kn[np.abs(kn) == n // 2] = 0.0
        kd.append(kn.reshape(shape))
    return ks, kd


def _axes(dim: int) -> tuple:
    return tuple(range(-dim, 0))


def spectrum(f: PeriodicField) -> np.ndarray:
    return sfft.rfftn(f.data, axes=_axes(f.dim), workers=_WORKERS)


def from_spectrum(fh: np.ndarray, dim: int, n: int) -> PeriodicField:
    return PeriodicField(sfft.irfftn(fh, s=(n,) * dim, axes=_axes(dim), workers=_WORKERS))


def derivative(f: PeriodicField, axis: int, order: int = 1) -> PeriodicField:
    _, kd = _wavenumbers(f.dim, f.grid_size)
    mult = (2j * np.pi * kd[axis]) ** order
    if order % 2 == 0:
        ks, _ = _wavenumbers(f.dim, f.grid_size)
        mult = (2j * np.pi * ks[axis]) ** order
    return from_spectrum(spectrum(f) * mult, f.dim, f.grid_size)


def gradient(f: PeriodicField) -> PeriodicField:
    if not f.is_scalar:
        raise FieldError("gradient expects a scalar field")
    fh = spectrum(f)[0]
    _, kd = _wavenumbers(f.dim, f.grid_size)
    gh = np.stack([2j * np.pi * k * fh for k in kd])
    return from_spectrum(gh, f.dim, f.grid_size)


def divergence(v: PeriodicField) -> PeriodicField:
    if v.components != v.dim:
        raise FieldError("divergence expects a vector field")
    vh = spectrum(v)
    _, kd = _wavenumbers(v.dim, v.grid_size)
    dh = sum(2j * np.pi * kd[i] * vh[i] for i in range(v.dim))
    return from_spectrum(dh[None], v.dim, v.grid_size)


def directional_derivative(f: PeriodicField, direction) -> PeriodicField:
    fh = spectrum(f)
    _, kd = _wavenumbers(f.dim, f.grid_size)
    mult = sum(2j * np.pi * kd[i] * direction[i] for i in range(f.dim))
    return from_spectrum(fh * mult, f.dim, f.grid_size)


def curl(a: PeriodicField) -> PeriodicField:
    if a.dim != 3 or a.components != 3:
        raise FieldError("curl is implemented for 3d vector fields")
    ah = spectrum(a)
    _, kd = _wavenumbers(3, a.grid_size)
    ik = [2j * np.pi * k for k in kd]
    out = np.stack([ik[1] * ah[2] - ik[2] * ah[1],
                    ik[2] * ah[0] - ik[0] * ah[2],
                    ik[0] * ah[1] - ik[1] * ah[0]])
    return from_spectrum(out, 3, a.grid_size)


def lp_norm(f: PeriodicField, s: float) -> float:
    """Grid quadrature of |f|^s to the power 1/s; |.| is Euclidean across components."""
    if not s >= 1:
        raise FieldError(f"norm exponent must be >= 1, got {s}")
    a = f.pointwise_norm()
    if np.isinf(s):
        return float(a.max())
    if s == 1:
        return float(a.mean())
    if s == 2:
        return float(np.sqrt(np.mean(a * a)))
    return float(np.mean(a**s) ** (1.0 / s))


def sobolev_norm(f: PeriodicField, k: int, p: float) -> float:
    """Sum of L^p norms of all distinct partial derivatives of order <= k."""
    if k < 0 or k > 2:
        raise FieldError(f"derivative order {k} unsupported (0 <= k <= 2)")
    total = lp_norm(f, p)
    if k == 0:
        return total
    d = f.dim
    fh = spectrum(f)
    ks, kd = _wavenumbers(d, f.grid_size)
    for i in range(d):
        total += lp_norm(from_spectrum(fh * (2j * np.pi * kd[i]), d, f.grid_size), p)
    if k == 2:
        for i in range(d):
            for j in range(i, d):
                if i == j:
                    mult = (2j * np.pi * ks[i]) ** 2
                else:
                    mult = (2j * np.pi) ** 2 * kd[i] * kd[j]
                total += lp_norm(from_spectrum(fh * mult, d, f.grid_size), p)
    return total


def poisson_antidivergence(g: PeriodicField, tol: float = 1e-9) -> PeriodicField:
    """grad Delta^{-1} g for a mean-zero scalar g.

    The inverse uses the symbol of the discrete div∘grad, so div of the
    result reproduces g up to modes that no spectral derivative can reach
    (pure Nyquist modes).
    """
    if not g.is_scalar:
        raise FieldError("poisson_antidivergence expects a scalar field")
    scale = max(float(np.mean(np.abs(g.data))), 1.0)
    if abs(g.mean()[0]) > tol * scale:
        raise FieldError(f"input is not mean-zero (mean {g.mean()[0]:.3e}); "
                         "subtract the mean before inverting")
    d, n = g.dim, g.grid_size
    _, kd = _wavenumbers(d, n)
    k2 = sum(k * k for k in kd)
    inv = np.zeros_like(k2)
    np.divide(1.0, k2, out=inv, where=k2 > 0)
    gh = spectrum(g)[0]
    out = np.stack([(-1j / (2 * np.pi)) * k * inv * gh for k in kd])
    return from_spectrum(out, d, n)


def subtract_mean(f: PeriodicField) -> PeriodicField:
    m = f.mean().reshape((-1,) + (1,) * f.dim)
    return PeriodicField(f.data - m)


def _symmetric_coefficients(f: PeriodicField):
    """Fourier coefficients on frequencies -N/2..N/2 per axis with the Nyquist
    coefficient split evenly between +N/2 and -N/2 (a real interpolant)."""
    d, n = f.dim, f.grid_size
    fh = sfft.fftn(f.data, axes=_axes(d), workers=_WORKERS) / n**d
    idx = np.concatenate([np.arange(n // 2 + 1), np.arange(n // 2, n)])
    w = np.ones(n + 1)
    w[n // 2] = w[n // 2 + 1] = 0.5
    coef = fh
    for axis in range(d):
        coef = np.take(coef, idx, axis=axis + 1)
        shape = [1] * (d + 1)
        shape[axis + 1] = n + 1
        coef = coef * w.reshape(shape)
    freqs = np.concatenate([np.arange(n // 2 + 1), np.arange(-n // 2, 0)])
    return coef, freqs


def resample(f: PeriodicField, n_new: int) -> PeriodicField:
    """Trigonometric interpolation onto a finer grid (n_new >= N)."""
    d, n = f.dim, f.grid_size
    if n_new < n:
        raise FieldError("resample only refines")
    if n_new == n:
        return f
    coef, freqs = _symmetric_coefficients(f)
    dst = np.where(freqs >= 0, freqs, n_new + freqs)
    out = np.zeros((f.components,) + (n_new,) * d, dtype=complex)
    out[np.ix_(range(f.components), *([dst] * d))] = coef
    data = sfft.ifftn(out, axes=_axes(d), workers=_WORKERS).real * n_new**d
    return PeriodicField(data)


def truncate(f: PeriodicField, n_new: int) -> PeriodicField:
    """Keep the modes representable on a coarser grid."""
    d, n = f.dim, f.grid_size
    fh = sfft.fftn(f.data, axes=_axes(d), workers=_WORKERS)
    k = np.fft.fftfreq(n, 1.0 / n).astype(int)
    keep = np.nonzero(np.abs(k) < n_new // 2)[0]
    kk = k[keep]
    dst = np.where(kk >= 0, kk, n_new + kk)
    out = np.zeros((f.components,) + (n_new,) * d, dtype=complex)
    out[np.ix_(range(f.components), *([dst] * d))] = fh[np.ix_(range(f.components), *([keep] * d))]
    data = sfft.ifftn(out, axes=_axes(d), workers=_WORKERS).real * (n_new / n) ** d
    return PeriodicField(data)


def multiply(f: PeriodicField, g: PeriodicField, dealias: bool = False,
             refined: bool = False) -> PeriodicField:
    """Pointwise product.  Scalar times vector broadcasts.

    With ``dealias`` the product is formed on the doubled grid and truncated
    back; with ``refined`` the doubled-grid product itself is returned.
    """
    if dealias or refined:
        n = f.grid_size
        prod = multiply(resample(f, 2 * n), resample(g, 2 * n))
        return prod if refined else truncate(prod, n)
    if f.components != g.components and 1 not in (f.components, g.components):
        raise FieldError("incompatible components")
    return PeriodicField(f.data * g.data)


def dot(f: PeriodicField, g: PeriodicField) -> PeriodicField:
    return PeriodicField(np.sum(f.data * g.data, axis=0, keepdims=True))


class TrigInterpolant:
    """Real trigonometric interpolant of a field, evaluable at any point."""

    def __init__(self, f: PeriodicField):
        coef, freqs = _symmetric_coefficients(f)
        self.coef = coef
        self.freqs = freqs.astype(float)
        self.dim = f.dim

    def __call__(self, points: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Values at points of shape (M, d); returns (C, M)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((self.coef.shape[0], pts.shape[0]))
        for start in range(0, pts.shape[0], chunk):
            p = pts[start:start + chunk]
            e = [np.exp(2j * np.pi * np.outer(p[:, i], self.freqs)) for i in range(self.dim)]
            acc = np.tensordot(self.coef, e[-1], axes=([self.dim], [1]))  # (C, ..., M)
            for axis in range(self.dim - 2, -1, -1):
                acc = np.einsum("...km,mk->...m", acc, e[axis])
            out[:, start:start + chunk] = acc.real
        return out


def evaluate(f: PeriodicField, points: np.ndarray) -> np.ndarray:
    return TrigInterpolant(f)(points)


# ---------------------------------------------------------------- mollifier


@dataclass(frozen=True)
class MollifierSpec:
    profile: Profile = field(default_factory=lambda: Profile("exp"))


def kernel_weights(width: float, step: float, profile: Profile) -> tuple[np.ndarray, np.ndarray]:
    """Offsets (in units of ``step``) and unit-sum weights of a 1d kernel."""
    m = int(np.floor(width / step - 1e-12))
    offsets = np.arange(-m, m + 1)
    w = profile(np.abs(offsets) * step / width)
    total = w.sum()
    if m < 1 or total <= 0:
        raise FieldError("mollifier kernel is not resolved by the grid")
    return offsets, w / total


def space_multiplier(dim: int, n: int, ell: float, profile: Profile) -> np.ndarray:
    """Fourier multiplier of the tensorized spatial kernel in rfftn layout."""
    offsets, w = kernel_weights(ell, 1.0 / n, profile)
    ker = np.zeros(n)
    np.add.at(ker, offsets % n, w)
    full = np.real(np.fft.fft(ker))
    half = full[: n // 2 + 1]
    mult = np.ones((1,) * dim)
    for axis in range(dim):
        shape = [1] * dim
        shape[axis] = n // 2 + 1 if axis == dim - 1 else n
        mult = mult * (half if axis == dim - 1 else full).reshape(shape)
    return mult


def mollify_space(f: PeriodicField, ell: float, spec: MollifierSpec = MollifierSpec()) -> PeriodicField:
    if ell < 2.0 / f.grid_size:
        raise FieldError(f"ell={ell} under-resolved on N={f.grid_size} (need ell >= 2/N)")
    mult = space_multiplier(f.dim, f.grid_size, ell, spec.profile)
    return from_spectrum(spectrum(f) * mult, f.dim, f.grid_size)


# ---------------------------------------------------------------- time series


class LazyFrames:
    """Array-like stack of frames computed on demand by ``fn(index)``.

    Supports integer indexing and slicing (views share the cache), which is
    all the time-series code needs.
    """

    def __init__(self, fn: Callable[[int], np.ndarray], count: int, frame_shape: tuple,
                 start: int = 0, step: int = 1, cache: dict | None = None, cache_size: int = 16):
        self.fn, self.count, self.frame_shape = fn, int(count), tuple(frame_shape)
        self.start, self.step = int(start), int(step)
        self.cache = {} if cache is None else cache
        self.cache_size = cache_size

    @property
    def shape(self) -> tuple:
        return (self.count,) + self.frame_shape

    @property
    def ndim(self) -> int:
        return 1 + len(self.frame_shape)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, key):
        if isinstance(key, slice):
            idx = range(self.count)[key]
            return LazyFrames(self.fn, len(idx), self.frame_shape, self.start + idx.start * self.step,
                              self.step * idx.step, self.cache, self.cache_size)
        i = int(key)
        if i < 0:
            i += self.count
        if not 0 <= i < self.count:
            raise IndexError(i)
        j = self.start + i * self.step
        if j not in self.cache:
            if len(self.cache) >= self.cache_size:
                self.cache.pop(next(iter(self.cache)))
            self.cache[j] = np.asarray(self.fn(j), dtype=float)
        return self.cache[j]


@dataclass(frozen=True, eq=False)
class TimeSeriesField:
    """Frames on the nodes t_start - pad + i*dt of the padded window."""

    t_start: float
    t_end: float
    pad: float
    dt: float
    frames: np.ndarray  # (nt, C, N, ..., N); may be a broadcast view or LazyFrames

    def __post_init__(self):
        if self.dt <= 0 or self.pad < 0 or self.t_end < self.t_start:
            raise FieldError("invalid time window")
        expected = 1 + int(round((self.t_end - self.t_start + 2 * self.pad) / self.dt))
        if self.frames.shape[0] != expected:
            raise FieldError(f"expected {expected} frames, got {self.frames.shape[0]}")
        PeriodicField(self.frames[0])

    @classmethod
    def from_function(cls, func: Callable, dim: int, n: int, t_start: float, t_end: float,
                      pad: float, dt: float) -> "TimeSeriesField":
        nt = 1 + int(round((t_end - t_start + 2 * pad) / dt))
        x = grid(dim, n)
        frames = []
        for i in range(nt):
            vals = np.asarray(func(t_start - pad + i * dt, x), dtype=float)
            if vals.ndim == dim:
                vals = vals[None]
            frames.append(np.broadcast_to(vals, (vals.shape[0],) + (n,) * dim))
        return cls(t_start, t_end, pad, dt, np.stack(frames))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t_start - self.pad + self.dt * np.arange(self.n_frames)

    @property
    def dim(self) -> int:
        return self.frames.ndim - 2

    @property
    def grid_size(self) -> int:
        return self.frames.shape[2]

    @property
    def components(self) -> int:
        return self.frames.shape[1]

    def frame(self, i: int) -> PeriodicField:
        return PeriodicField(self.frames[i])

    def index_of(self, t: float) -> int:
        i = int(round((t - self.t_start + self.pad) / self.dt))
        if i < 0 or i >= self.n_frames or abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise FieldError(f"time {t} is not a node of the series")
        return i

    def window_indices(self, t0: float | None = None, t1: float | None = None) -> range:
        t0 = self.t_start if t0 is None else t0
        t1 = self.t_end if t1 is None else t1
        tt = self.times
        idx = np.nonzero((tt >= t0 - 1e-9 * self.dt) & (tt <= t1 + 1e-9 * self.dt))[0]
        return range(int(idx[0]), int(idx[-1]) + 1)

    def time_derivative(self, i: int) -> PeriodicField:
        """Centered difference at node i (one-sided at the ends)."""
        if 0 < i < self.n_frames - 1:
            return PeriodicField((self.frames[i + 1] - self.frames[i - 1]) / (2 * self.dt))
        if i == 0:
            return PeriodicField((self.frames[1] - self.frames[0]) / self.dt)
        return PeriodicField((self.frames[i] - self.frames[i - 1]) / self.dt)

    def restrict(self, pad: float) -> "TimeSeriesField":
        """Same window with a smaller pad."""
        drop = int(round((self.pad - pad) / self.dt))
        if drop < 0:
            raise FieldError("cannot enlarge the pad")
        frames = self.frames[drop:self.n_frames - drop] if drop else self.frames
        return TimeSeriesField(self.t_start, self.t_end, self.pad - drop * self.dt, self.dt, frames)

    def sup_norm(self, norm: Callable[[PeriodicField], float],
                 t0: float | None = None, t1: float | None = None) -> tuple[float, float]:
        """Max over nodes in [t0, t1] of norm(frame) and the node attaining it."""
        best, arg = -1.0, float("nan")
        for i in self.window_indices(t0, t1):
            v = norm(self.frame(i))
            if v > best:
                best, arg = v, float(self.times[i])
        return best, arg


def mollify_time_weights(dt: float, ell: float, spec: MollifierSpec) -> tuple[np.ndarray, np.ndarray]:
    if ell < 2 * dt:
        raise FieldError(f"ell={ell} under-resolved in time (need ell >= 2 dt = {2 * dt})")
    return kernel_weights(ell, dt, spec.profile)


def mollify_time_derivative_weights(dt: float, ell: float,
                                    spec: MollifierSpec) -> tuple[np.ndarray, np.ndarray]:
    """Weights of d/dt of the time mollification, applied to frames i + offset."""
    offsets, _ = mollify_time_weights(dt, ell, spec)
    s = np.abs(offsets) * dt / ell
    total = spec.profile(s).sum()
    return offsets, -spec.profile.derivative(s) * np.sign(offsets) / (ell * total)


def mollified_frame(series: TimeSeriesField, i: int, ell: float,
                    spec: MollifierSpec = MollifierSpec(),
                    transform: Callable[[np.ndarray], np.ndarray] | None = None,
                    derivative: bool = False) -> PeriodicField:
    """Space-time mollification evaluated at a single node.

    ``transform`` is applied to every input frame first (used to mollify
    pointwise functions of the data without storing them).  With
    ``derivative`` the time derivative of the mollified field is returned.
    """
    if derivative:
        offsets, w = mollify_time_derivative_weights(series.dt, ell, spec)
    else:
        offsets, w = mollify_time_weights(series.dt, ell, spec)
    if i + offsets[0] < 0 or i + offsets[-1] >= series.n_frames:
        raise FieldError("mollification window runs off the series")
    acc = None
    shape = None
    for o, wk in zip(offsets, w):
        fr = series.frames[i + o]
        if transform is not None:
            fr = transform(fr)
        shape = fr.shape
        fr = _compact(fr)
        acc = wk * fr if acc is None else acc + wk * fr
    return mollify_space(PeriodicField(np.broadcast_to(acc, shape)), ell, spec)


def _compact(a: np.ndarray) -> np.ndarray:
    """Drop the repeated axes of a broadcast view (strides of zero)."""
    if not isinstance(a, np.ndarray) or 0 not in a.strides:
        return a
    return a[tuple(slice(0, 1) if (st == 0 and sh > 1) else slice(None)
                   for st, sh in zip(a.strides, a.shape))]


def mollify_spacetime(series: TimeSeriesField, ell: float,
                      spec: MollifierSpec = MollifierSpec()) -> TimeSeriesField:
    """Convolution with the tensorized bump of width ell in each space axis
    and in time.  The output keeps the window and loses the kernel half-width
    of padding on each side."""
    if series.pad < 2 * ell - 1e-12:
        raise FieldError(f"pad {series.pad} is smaller than 2*ell = {2 * ell}")
    offsets, _ = mollify_time_weights(series.dt, ell, spec)
    m = int(offsets[-1])
    frames = np.stack([mollified_frame(series, i, ell, spec).data
                       for i in range(m, series.n_frames - m)])
    return TimeSeriesField(series.t_start, series.t_end, series.pad - m * series.dt,
                           series.dt, frames)


# ---------------------------------------------------------------- reports & io


@dataclass
class NormReport:
    values: dict = field(default_factory=dict)
    argmax: dict = field(default_factory=dict)

    def add(self, label: str, value: float, at: float | None = None) -> None:
        value = float(value)
        if not np.isfinite(value) or value < 0:
            raise FieldError(f"norm {label} is not a finite nonnegative number: {value}")
        self.values[label] = value
        if at is not None:
            self.argmax[label] = float(at)

    def to_json(self) -> str:
        return json.dumps({"values": self.values, "argmax": self.argmax},
                          indent=2, sort_keys=True)


_HEADER = struct.Struct("<qqqd")


def save_field(f: PeriodicField, path, time_tag: float = 0.0) -> None:
    """Binary container: little-endian int64 dim, N, components, float64 time
    tag, then float64 samples in row-major order (component axis first)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(f.dim, f.grid_size, f.components, float(time_tag)))
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def load_field(path) -> tuple[PeriodicField, float]:
    with open(path, "rb") as fh:
        dim, n, comps, tag = _HEADER.unpack(fh.read(_HEADER.size))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return PeriodicField(data.reshape((comps,) + (n,) * dim).copy()), tag


def lp_norms(f: PeriodicField, exponents: Sequence[float]) -> dict:
    return {s: lp_norm(f, s) for s in exponents}
