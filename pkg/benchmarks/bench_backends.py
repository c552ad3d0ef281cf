"""Wall-clock comparison of the numba kernels against the numpy fallback.

Run with ``python benchmarks/bench_backends.py``.  Both backends consume the
same random streams, so each row also checks that their outputs agree.
"""
import argparse
import time

import numpy as np

from qsdlab import _accel
from qsdlab.kernel import assemble, hitting_samples
from qsdlab.protocols import AspirationUniform, hawk_dove
from qsdlab.qsd import kernel_qsd
from qsdlab.simplex import enumerate_grid, rank


def timed(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _accel.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    protocol = AspirationUniform(hawk_dove())
    cases = []
    for N in (40, 80):
        k = assemble(protocol, enumerate_grid(2, N))
        cases.append((f"power iteration N={N}",
                      lambda b, k=k: kernel_qsd(k, 1e-12, 10**6, backend=b, polish=False),
                      lambda a, b: np.abs(a.mu - b.mu).sum() <= 1e-13))
    k = assemble(protocol, enumerate_grid(2, 24))
    r = rank(k.grid, (12, 12))
    inside = ~k.grid.boundary_mask
    cases.append(("exit times N=24, 2000 chains",
                  lambda b: hitting_samples(k, inside, [r], [1.0], 2000, 1, 10**8, 1, backend=b),
                  lambda a, b: np.array_equal(a.times, b.times)))
    k3 = assemble(protocol, enumerate_grid(2, 16))
    starts = np.full(500, rank(k3.grid, (8, 8)))
    u = np.random.default_rng(0).random((500, 2000))
    cases.append(("500 paths x 2000 steps N=16",
                  lambda b: _accel.simulate_paths(k3.targets, k3.cum, starts, u, backend=b),
                  lambda a, b: np.array_equal(a, b)))

    print(f"{'case':32s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}  agree")
    for name, run, same in cases:
        run("numba")  # compile outside the timed region
        tn, a = timed(lambda: run("numpy"), args.repeat)
        tb, b = timed(lambda: run("numba"), args.repeat)
        print(f"{name:32s} {tn:10.4f} {tb:10.4f} {tn / tb:8.1f}  {bool(same(a, b))}")


if __name__ == "__main__":
    main()
