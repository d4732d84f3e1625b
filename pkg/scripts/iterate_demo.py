"""Two steps on a stationary solution with zero error.

The first step has nothing to cancel and only mollifies; the second acts on
the commutator error left by the first. Prints per-step error norms and the
increments of rho and b.
"""
import argparse

import numpy as np

from convexint import SchemeParams, StepConfig, Triple, iterate
from convexint.fields import TimeSeriesField


def resting_triple(n, t_end=0.8, pad=0.45, dt=1 / 256):
    nt = 1 + int(round((t_end + 2 * pad) / dt))
    x1 = np.arange(n) / n
    rho = np.broadcast_to((0.3 + 0.1 * np.cos(2 * np.pi * x1)).reshape(1, n, 1, 1), (1, n, n, n))
    b = np.zeros((3, n, n, n))
    b[1] = 0.1 * np.sin(2 * np.pi * x1).reshape(n, 1, 1)

    def series(a):
        return TimeSeriesField(0.0, t_end, pad, dt, np.broadcast_to(a, (nt,) + a.shape))

    return Triple(series(rho), series(b), series(np.zeros((3, n, n, n))), eta=0.0)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=32)
    args = ap.parse_args()
    params = SchemeParams(eta=1.05, rbar=0.26, lam=4, ell=0.07, sigma=16.0)
    cfg = StepConfig(dt_out=1 / 4096, dt_sub=1 / 4096, anchors=[[0.1, 0.2, 0.3]], samples=2)
    _, it = iterate(resting_triple(args.N), [(params, cfg)] * 2, 2, dt_in=[1 / 256, 1 / 64])
    for k, rep in enumerate(it.steps):
        norms = ", ".join(f"{t}={v:.3g}" for t, v in rep.error_norms.items())
        print(f"step {k}: window {rep.window_out}, active {rep.active}")
        print(f"  {norms}")
        print(f"  |d rho|_Lq = {it.rho_increments[k]:.3g}, |d b|_W1p = {it.b_increments[k]:.3g}")
