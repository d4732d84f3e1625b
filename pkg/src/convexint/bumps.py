"""Compactly supported radial profiles shared by the constructions.

Two families are provided.  ``exp`` is the classical smooth bump
exp(-1/(1-s^2)); ``poly`` is (1-s^2)^m, which is only C^(m-1) at the rim but
is far better resolved by a spectral grid at the radii the scheme uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gamma, pi

import numpy as np
from scipy import integrate
from scipy.special import betainc


@dataclass(frozen=True)
class Profile:
    """Radial profile f(s) on [0, 1) with f = 0 for s >= 1."""

    kind: str = "poly"
    order: int = 10

    def __post_init__(self):
        if self.kind not in ("poly", "exp"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "poly" and self.order < 2:
            raise ValueError("poly profile needs order >= 2")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        inside = s < 1.0
        t = np.where(inside, 1.0 - s * s, 1.0)
        if self.kind == "poly":
            out = t**self.order
        else:
            out = np.exp(-1.0 / t)
        return np.where(inside, out, 0.0)

    def derivative(self, s):
        """d/ds of the profile."""
        s = np.asarray(s, dtype=float)
        inside = s < 1.0
        t = np.where(inside, 1.0 - s * s, 1.0)
        if self.kind == "poly":
            out = -2.0 * self.order * s * t ** (self.order - 1)
        else:
            out = np.exp(-1.0 / t) * (-2.0 * s) / t**2
        return np.where(inside, out, 0.0)

    def ball_integral(self, d: int) -> float:
        """Integral of f(|x|) over the unit ball of R^d."""
        if self.kind == "poly":
            m = self.order
            return pi ** (d / 2) * gamma(m + 1) / gamma(m + 1 + d / 2)
        sphere = 2 * pi ** (d / 2) / gamma(d / 2)
        val, _ = integrate.quad(lambda s: float(self(s)) * s ** (d - 1), 0.0, 1.0,
                                epsabs=1e-15, epsrel=1e-13, limit=200)
        return sphere * val

    def line_integral(self) -> float:
        """Integral of f over [-1, 1]."""
        if self.kind == "poly":
            m = self.order
            return float(np.sqrt(pi) * gamma(m + 1) / gamma(m + 1.5))
        val, _ = integrate.quad(lambda s: float(self(s)), -1.0, 1.0,
                                epsabs=1e-15, epsrel=1e-13, limit=200)
        return val

    def as_dict(self) -> dict:
        return {"kind": self.kind, "order": self.order}


def radial_bump(profile: Profile, d: int, radius: float):
    """Unit-mass radial bump on R^d supported in the ball of the given radius.

    Returns a callable of displacement vectors with the component axis first.
    """
    scale = 1.0 / (profile.ball_integral(d) * radius**d)

    def bump(y):
        s = np.sqrt(np.sum(np.asarray(y) ** 2, axis=0)) / radius
        return scale * profile(s)

    return bump


def smooth_step(s, order: int = 8):
    """Cutoff equal to 1 for s <= 1/2 and to 0 for s >= 1, C^(order-1)."""
    t = np.clip(2.0 * np.asarray(s, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - betainc(order, order, t)


def smooth_step_derivative(s, order: int = 8):
    s = np.asarray(s, dtype=float)
    t = np.clip(2.0 * s - 1.0, 0.0, 1.0)
    beta_fn = gamma(order) ** 2 / gamma(2 * order)
    dens = t ** (order - 1) * (1.0 - t) ** (order - 1) / beta_fn
    return np.where((s > 0.5) & (s < 1.0), -2.0 * dens, 0.0)
