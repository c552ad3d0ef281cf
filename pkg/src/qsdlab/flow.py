"""Mean-field flow on the simplex: integration, attractors and tracking error.

``F`` is any callable mapping an array of simplex points ``(..., d)`` to
tangent vectors of the same shape (for instance
``lambda x: mean_field(protocol, x)``).  Integration uses classical RK4
with step-doubling error control and a clip-and-renormalise projection after
every accepted step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoConvergence, StepUnderflow
from .kernel import TransitionKernel, simulate_many
from .protocols import mean_field
from .simplex import cell_width, enumerate_grid, nearest_counts

LOCAL_TOL = 1e-9
MIN_STEP = 1e-12


def _project(x):
    x = np.clip(x, 0.0, None)
    return x / x.sum(axis=-1, keepdims=True)


def _rk4(F, x, h):
    k1 = F(x)
    k2 = F(x + 0.5 * h * k1)
    k3 = F(x + 0.5 * h * k2)
    k4 = F(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _advance(F, x, span, h, tol=LOCAL_TOL):
    """Advance a batch of points by ``span`` time units.

    Each point carries its own RK4 substep, halved until the step-doubling
    error estimate is below ``tol``, so a point near a kink of ``F`` does not
    slow down the rest of the batch.
    """
    x = np.array(x, dtype=float)
    m = x.shape[0]
    t = np.zeros(m)
    hs = np.full(m, min(h, span))
    active = np.arange(m)
    end = span * (1.0 - 1e-15)
    while active.size:
        step = np.minimum(hs[active], span - t[active])[:, None]
        xa = x[active]
        full = _rk4(F, xa, step)
        half = _rk4(F, _rk4(F, xa, 0.5 * step), 0.5 * step)
        err = np.abs(full - half).max(axis=1)
        ok = err <= tol
        acc = active[ok]
        x[acc] = _project(half[ok])
        t[acc] += step[ok, 0]
        grow = ok & (err < tol / 64.0)
        hs[active[grow]] = np.minimum(2.0 * hs[active[grow]], h)
        rej = active[~ok]
        hs[rej] *= 0.5
        if rej.size and hs[rej].min() < MIN_STEP:
            k = rej[np.argmin(hs[rej])]
            raise StepUnderflow(f"step fell below {MIN_STEP} at t={t[k]} from x={x[k]}")
        active = active[t[active] < end]
    return x


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)])
            for t, x in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def integrate(F, x0, T: float, h: float = 0.01, tol: float = LOCAL_TOL) -> Trajectory:
    """Trajectory of ``x' = F(x)`` on the output grid ``0, h, 2h, ..., T``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = _project(np.asarray(x0, dtype=float)[None, :])
    n = int(np.floor(T / h + 1e-9))
    times = np.arange(n + 1) * h
    if times[-1] < T - 1e-12:
        times = np.append(times, T)
    states = np.empty((len(times), x.shape[1]))
    states[0] = x[0]
    for k in range(1, len(times)):
        x = _advance(F, x, times[k] - times[k - 1], h, tol)
        states[k] = x[0]
    return Trajectory(times, states)


def flow_map_many(F, X, t: float, h: float = 0.05, tol: float = LOCAL_TOL) -> np.ndarray:
    """``phi_t`` applied to every row of ``X``."""
    X = _project(np.atleast_2d(np.asarray(X, dtype=float)))
    if t == 0:
        return X
    return _advance(F, X, float(t), h, tol)


def flow_map(F, x, t: float, h: float = 0.05, tol: float = LOCAL_TOL) -> np.ndarray:
    return flow_map_many(F, x, t, h, tol)[0]


def flow_samples(F, X, times, h: float = 0.05, tol: float = LOCAL_TOL) -> np.ndarray:
    """``phi_t(X)`` at each of the increasing ``times``; shape ``(len(times), m, d)``."""
    X = _project(np.atleast_2d(np.asarray(X, dtype=float)))
    out = np.empty((len(times),) + X.shape)
    t_prev = 0.0
    for k, t in enumerate(times):
        if t > t_prev:
            X = _advance(F, X, t - t_prev, h, tol)
            t_prev = t
        out[k] = X
    return out


class FlowCache:
    """Memo of ``phi_t`` at lattice cells of ``Delta_M``, keyed by ``(cell counts, t)``.

    Values are deterministic, so concurrent writers can only store equal values.
    """

    def __init__(self, F, M: int):
        self.F = F
        self.M = M
        self._store: dict[tuple, np.ndarray] = {}

    def __call__(self, counts, t: float) -> np.ndarray:
        key = (tuple(int(c) for c in counts), float(t))
        hit = self._store.get(key)
        if hit is None:
            hit = flow_map(self.F, np.asarray(counts, float) / self.M, t)
            self._store[key] = hit
        return hit

    def __len__(self):
        return len(self._store)


@dataclass(frozen=True)
class AttractorReport:
    M: int
    attractor_cells: np.ndarray          # ranks in Delta_M
    fundamental_neighborhood: np.ndarray  # ranks in Delta_M
    checkpoints: np.ndarray
    uniform_convergence_profile: np.ndarray
    interior_flag: bool
    attractor_points: np.ndarray = field(repr=False, default=None)


def _distance_to_boundary(x):
    d = x.shape[-1]
    return x.min(axis=-1) * np.sqrt(d / (d - 1.0))


def find_attractor(F, seeds, M: int, transient_T: float = 200.0, window_T: float = 50.0,
                   checkpoint: float = 5.0, h: float = 0.1) -> AttractorReport:
    """Cell-level attractor of the flow reached from ``seeds`` (points of the simplex).

    Seeds are integrated past ``transient_T``; the cells of ``Delta_M`` visited
    during the following ``window_T`` form the attractor.  The fundamental
    neighborhood is the largest ball of cells around it (radius counted in
    cell widths) whose worst-case distance to the attractor falls below one
    cell width by ``transient_T``.
    """
    grid = enumerate_grid(len(np.atleast_2d(seeds)[0]), M)
    width = cell_width(M)
    X = flow_map_many(F, seeds, transient_T, h)
    n_win = max(1, int(round(window_T / h)))
    visits = flow_samples(F, X, np.arange(1, n_win + 1) * h, h).reshape(-1, grid.d)
    visits = np.vstack([X, visits])
    cells = np.unique(grid.rank_many(nearest_counts(visits, M)))
    attractor_tree = cKDTree(visits)
    checkpoints = np.arange(0.0, transient_T + 1e-9, checkpoint)
    all_pts = grid.points
    cell_tree = cKDTree(all_pts[cells])
    dist_to_cells, _ = cell_tree.query(all_pts)

    traj = flow_samples(F, all_pts, checkpoints, h)
    dist, _ = attractor_tree.query(traj.reshape(-1, grid.d))
    dist = dist.reshape(len(checkpoints), grid.n_points)
    best, best_profile = None, None
    max_r = int(np.ceil(dist_to_cells.max() / width)) + 1
    for r in range(0, max_r + 1):
        U = np.flatnonzero(dist_to_cells <= r * width + 1e-12)
        profile = dist[:, U].max(axis=1)
        if profile[-1] >= width:
            break
        best, best_profile = U, profile
        if len(U) == grid.n_points:
            break
    if best is None:
        raise NoConvergence("no tested neighborhood converges to the attractor")
    interior = bool((_distance_to_boundary(all_pts[cells]) > width + 1e-12).all())
    return AttractorReport(M, cells, best, checkpoints, best_profile, interior, visits)


@dataclass(frozen=True)
class DeviationSamples:
    samples: np.ndarray
    exceedance: dict


def deviation_statistic(kernel: TransitionKernel, x0: int, T: float, n_paths: int, seed: int,
                        eps_values=(0.1,)) -> DeviationSamples:
    """Samples of ``max_{k/N <= T} |X_k - phi_{k/N}(x0)|`` for chains started at rank ``x0``."""
    N = kernel.N
    steps = int(np.floor(T * N + 1e-9))
    pts = kernel.grid.points
    F = lambda x: mean_field(kernel.protocol, x)  # noqa: E731
    ref = integrate(F, pts[x0], steps / N, h=1.0 / N).states[: steps + 1]
    paths = simulate_many(kernel, np.full(n_paths, x0), steps, seed)
    dev = np.linalg.norm(pts[paths] - ref[None, :, :], axis=2).max(axis=1)
    exceed = {float(e): float(np.mean(dev >= e)) for e in eps_values}
    return DeviationSamples(dev, exceed)


def interior_equilibria(F, d: int, M: int, tol: float = 1e-10) -> np.ndarray:
    """Interior zeros of ``F`` found by refining the local minima of ``|F|`` on ``Delta_M``.

    Returns an ``(k, d)`` array sorted lexicographically; distinct roots
    closer than ``1e-6`` are merged.
    """
    from scipy.optimize import root

    grid = enumerate_grid(d, M)
    inner = grid.interior_index
    if inner.size == 0:
        return np.empty((0, d))
    pts = grid.points
    speed = np.linalg.norm(F(pts), axis=1)
    found = []
    counts = grid.counts
    for r in inner:
        c = counts[r]
        nbr = []
        for i in range(d):
            for j in range(d):
                if i != j and c[i] > 0:
                    n = c.copy()
                    n[i] -= 1
                    n[j] += 1
                    nbr.append(n)
        nbr_ranks = grid.rank_many(np.array(nbr))
        if speed[r] > speed[nbr_ranks].min():
            continue

        def reduced(z):
            x = np.append(z, 1.0 - z.sum())
            return F(x)[:-1]

        sol = root(reduced, pts[r, :-1], tol=tol * 1e-2)
        x = np.append(sol.x, 1.0 - sol.x.sum())
        if sol.success and x.min() > 0 and np.linalg.norm(F(x)) <= tol:
            if not any(np.linalg.norm(x - y) < 1e-6 for y in found):
                found.append(x)
    if not found:
        return np.empty((0, d))
    out = np.array(found)
    return out[np.lexsort(out.T[::-1])]
