"""Transition kernel of the imitation chain on Delta_N and its simulation.

From a state ``x`` the chain moves to ``x + (e_j - e_i)/N`` with probability
``p_ij(x)`` and stays put with the remaining mass.  The kernel keeps the
full sparse matrix, its substochastic restriction to interior states and
the one-step absorption mass of every interior state.

Randomness: every sample task ``k`` draws from its own Philox stream keyed
by ``(seed, k)``, so results do not depend on how tasks are scheduled.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from . import _accel
from .errors import AllCensored, ProtocolViolation
from .protocols import RevisionProtocol, mean_field, outflow
from .simplex import SimplexGrid

ROW_TOL = 1e-12
DEFAULT_STEP_CAP = 10**9
_CHUNK = 100_000


def stream(seed: int, task: int) -> np.random.Generator:
    """Counter-based generator for sample task ``task`` of a run seeded by ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(task),))
    return np.random.Generator(np.random.Philox(ss))


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("QSDLAB_THREADS", "1"))
    return max(1, int(threads))


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    grid: SimplexGrid
    protocol: RevisionProtocol
    matrix: sp.csr_matrix = field(repr=False)
    interior_matrix: sp.csr_matrix = field(repr=False)
    absorb_mass: np.ndarray = field(repr=False)
    # padded row tables used by the simulation kernels
    targets: np.ndarray = field(repr=False)
    cum: np.ndarray = field(repr=False)
    move_targets: np.ndarray = field(repr=False)
    move_cum: np.ndarray = field(repr=False)
    stay: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def d(self) -> int:
        return self.grid.d

    def row(self, index: int) -> dict[int, float]:
        lo, hi = self.matrix.indptr[index], self.matrix.indptr[index + 1]
        return dict(zip(self.matrix.indices[lo:hi].tolist(), self.matrix.data[lo:hi].tolist()))


def _padded(indptr, indices, data, n, fill_target):
    counts = np.diff(indptr)
    width = max(1, int(counts.max(initial=0)))
    rows = np.repeat(np.arange(n), counts)
    slot = np.arange(len(indices)) - np.repeat(indptr[:-1], counts)
    targets = np.repeat(np.asarray(fill_target, dtype=np.int64)[:, None], width, axis=1)
    targets[rows, slot] = indices
    probs = np.zeros((n, width))
    probs[rows, slot] = data
    cum = np.cumsum(probs, axis=1)
    pad = np.arange(width)[None, :] >= counts[:, None]
    cum[pad] = 2.0
    has = np.flatnonzero(counts > 0)
    # the last entry of each row absorbs rounding so a draw below 1 always lands
    cum[has, counts[has] - 1] = 2.0
    return targets, cum


def assemble(protocol: RevisionProtocol, grid: SimplexGrid) -> TransitionKernel:
    """Build the transition kernel of ``protocol`` on ``grid``.

    Raises
    ------
    ProtocolViolation
        If a row carries more than ``1 + 1e-12`` of off-diagonal mass, a rate
        points off the simplex, or a boundary state can reach the interior.
    """
    if protocol.d != grid.d:
        raise ProtocolViolation(f"protocol has d={protocol.d}, grid has d={grid.d}")
    d, n = grid.d, grid.n_points
    counts = grid.counts
    boundary = grid.boundary_mask
    rows, cols, vals = [], [], []
    offmass = np.zeros(n, dtype=np.longdouble)
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        P = protocol.rates(counts[lo:hi] / grid.N)
        for i in range(d):
            for j in range(d):
                if i == j:
                    continue
                p = P[:, i, j]
                src = np.flatnonzero(p > 0.0) + lo
                if src.size == 0:
                    continue
                if (counts[src, i] == 0).any():
                    bad = src[counts[src, i] == 0][0]
                    raise ProtocolViolation(f"positive rate ({i}, {j}) with no agent of type {i}",
                                            state=counts[bad].copy())
                tgt_counts = counts[src].copy()
                tgt_counts[:, i] -= 1
                tgt_counts[:, j] += 1
                tgt = grid.rank_many(tgt_counts)
                leak = boundary[src] & ~boundary[tgt]
                if leak.any():
                    raise ProtocolViolation("boundary state jumps into the interior",
                                            state=counts[src[leak][0]].copy())
                rows.append(src)
                cols.append(tgt)
                vals.append(p[src - lo])
                offmass[src] += p[src - lo].astype(np.longdouble)
    over = offmass > 1.0 + ROW_TOL
    if over.any():
        k = int(np.flatnonzero(over)[0])
        raise ProtocolViolation(f"row mass {float(offmass[k]):.6g} exceeds 1", state=counts[k].copy())
    stay = np.clip((1.0 - offmass).astype(np.float64), 0.0, 1.0)
    all_rows = np.concatenate(rows + [np.arange(n)])
    all_cols = np.concatenate(cols + [np.arange(n)])
    all_vals = np.concatenate(vals + [stay])
    M = sp.csr_matrix((all_vals, (all_rows, all_cols)), shape=(n, n))
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()

    inner = grid.interior_index
    Qs = M[inner][:, inner].tocsr()
    Qs.sort_indices()
    absorb = np.asarray(M[inner][:, np.flatnonzero(boundary)].sum(axis=1)).ravel()

    targets, cum = _padded(M.indptr, M.indices, M.data, n, np.arange(n))
    off = M - sp.diags(M.diagonal())
    off = off.tocsr()
    off.eliminate_zeros()
    off.sort_indices()
    move_targets, move_cum = _padded(off.indptr, off.indices, off.data, n, np.arange(n))
    return TransitionKernel(grid, protocol, M, Qs, absorb, targets, cum, move_targets,
                            move_cum, stay)


def check_absorbing(kernel: TransitionKernel) -> np.ndarray:
    """Interior ranks from which the boundary is unreachable (empty if absorption is possible everywhere).

    Positive-probability reachability of the boundary is a sufficient proxy for
    almost-sure absorption on a finite state space.
    """
    n = kernel.grid.n_points
    boundary = np.flatnonzero(kernel.grid.boundary_mask)
    # reverse graph plus a super-source wired to every boundary state
    G = sp.vstack([kernel.matrix.T.tocsr(), sp.csr_matrix(
        (np.ones(len(boundary)), (np.zeros(len(boundary), dtype=int), boundary)), shape=(1, n))])
    G = sp.hstack([G, sp.csr_matrix((n + 1, 1))]).tocsr()
    seen = breadth_first_order(G, n, directed=True, return_predecessors=False)
    reach = np.zeros(n + 1, dtype=bool)
    reach[seen] = True
    inner = kernel.grid.interior_index
    return inner[~reach[inner]]


# ----------------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Path:
    states: np.ndarray          # grid ranks, length horizon + 1
    absorption_step: int | None


def simulate(kernel: TransitionKernel, x0, horizon_steps: int, seed: int, task: int = 0) -> Path:
    """One path of ``horizon_steps`` steps from rank ``x0``."""
    u = stream(seed, task).random(int(horizon_steps))[None, :]
    states = _accel.simulate_paths(kernel.targets, kernel.cum, [int(x0)], u)[0]
    hit = np.flatnonzero(kernel.grid.boundary_mask[states])
    return Path(states, int(hit[0]) if hit.size else None)


def simulate_many(kernel: TransitionKernel, starts, horizon_steps: int, seed: int,
                  task_offset: int = 0) -> np.ndarray:
    """Paths from each start; path ``k`` uses stream ``(seed, task_offset + k)``."""
    starts = np.asarray(starts, dtype=np.int64)
    u = np.empty((len(starts), int(horizon_steps)))
    for k in range(len(starts)):
        u[k] = stream(seed, task_offset + k).random(int(horizon_steps))
    return _accel.simulate_paths(kernel.targets, kernel.cum, starts, u)


class Interpolated:
    """Piecewise-linear path with knots at ``k / N``."""

    def __init__(self, points, N: int):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.N = N
        self.knots = np.arange(self.points.shape[0]) / N

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.knots, self.points[:, i])
                        for i in range(self.points.shape[1])], axis=-1)
        return out


def interpolate(path_points, N: int) -> Interpolated:
    return Interpolated(path_points, N)


@dataclass(frozen=True)
class HittingSamples:
    times: np.ndarray
    censored: np.ndarray
    starts: np.ndarray

    @property
    def uncensored(self) -> np.ndarray:
        return self.times[~self.censored]

    def mean(self) -> float:
        return float(np.mean(self.uncensored))

    def stderr(self) -> float:
        x = self.uncensored.astype(float)
        return float(np.std(x, ddof=1) / math.sqrt(len(x)))

    def survival(self, n: int) -> float:
        return float(np.mean(self.times > n))


def _draw_starts(weights: np.ndarray, ranks: np.ndarray, streams) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    u = np.array([g.random() for g in streams])
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(ranks) - 1)
    return ranks[idx]


def hitting_samples(kernel: TransitionKernel, inside: np.ndarray, initial_ranks, initial_weights,
                    n_samples: int, seed: int, step_cap: int = DEFAULT_STEP_CAP,
                    threads: int | None = None, backend: str | None = None) -> HittingSamples:
    """First exit times from the rank set ``inside`` (boolean mask over the grid).

    Starting states are drawn from ``initial_weights`` over ``initial_ranks``
    with the first uniform of each task's stream; the chain consumes the rest.
    """
    ranks = np.asarray(initial_ranks, dtype=np.int64)
    w = np.asarray(initial_weights, dtype=float)
    streams = [stream(seed, k) for k in range(n_samples)]
    starts = _draw_starts(w, ranks, streams)
    backend = backend or _accel.BACKEND
    args = (kernel.move_targets, kernel.move_cum, kernel.stay, np.asarray(inside, dtype=bool))
    nthreads = thread_count(threads)
    if backend == "numba" and nthreads > 1:
        chunks = np.array_split(np.arange(n_samples), nthreads)
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(
                lambda c: _accel.hitting_times(*args, starts[c], [streams[k] for k in c],
                                               step_cap, backend), chunks))
        times = np.concatenate([p[0] for p in parts])
        cens = np.concatenate([p[1] for p in parts])
    else:
        times, cens = _accel.hitting_times(*args, starts, streams, step_cap, backend)
    if n_samples and cens.all():
        raise AllCensored(f"all {n_samples} samples reached the step cap {step_cap}")
    return HittingSamples(times, cens, starts)


def absorption_time_samples(kernel: TransitionKernel, initial, n_samples: int, seed: int,
                            step_cap: int = DEFAULT_STEP_CAP, threads: int | None = None,
                            backend: str | None = None) -> HittingSamples:
    """Samples of the first step at which the chain hits the boundary.

    ``initial`` is a probability vector over interior states (ordered as
    ``grid.interior_index``).  Samples reaching ``step_cap`` are flagged as
    censored.
    """
    inside = ~kernel.grid.boundary_mask
    return hitting_samples(kernel, inside, kernel.grid.interior_index, initial, n_samples,
                           seed, step_cap, threads, backend)


@dataclass(frozen=True)
class DescentBound:
    steps: int
    product: float
    log_rate: float   # (1/N) log(product)


def descent_path(grid: SimplexGrid, face: int, steps: int) -> np.ndarray:
    """Points ``x^(j)``, ``j = 1..steps``, with ``n_face = j`` and the rest spread evenly."""
    d, N = grid.d, grid.N
    pts = np.empty((steps, d))
    others = [k for k in range(d) if k != face]
    for j in range(1, steps + 1):
        rest = N - j
        n = np.zeros(d, dtype=np.int64)
        n[face] = j
        base, extra = divmod(rest, d - 1)
        for r, k in enumerate(others):
            n[k] = base + (1 if r < extra else 0)
        pts[j - 1] = n / N
    return pts


def boundary_absorption_lower_bound(kernel: TransitionKernel, face: int, b: float) -> DescentBound:
    """Product of outflow probabilities of ``face`` along a monotone descent to ``x_face = 0``.

    Lower-bounds the probability of reaching the boundary within ``ceil(N b)``
    steps from the top of the descent path.
    """
    if not 0.0 < b < 1.0:
        raise ValueError("b must lie in (0, 1)")
    N = kernel.N
    steps = math.ceil(N * b)
    q = outflow(kernel.protocol, descent_path(kernel.grid, face, steps))[:, face]
    with np.errstate(divide="ignore"):
        logp = float(np.sum(np.log(q)))
    return DescentBound(steps, math.exp(logp), logp / N)


@dataclass(frozen=True)
class BetaEstimate:
    beta: float
    states: np.ndarray
    frequencies: np.ndarray
    half_widths: np.ndarray


def beta_estimate(kernel: TransitionKernel, K, delta: float, n_samples: int, seed: int,
                  flow_map=None) -> BetaEstimate:
    """Monte Carlo estimate of ``sup_{x in K} P_x[|X_hat(1) - phi_1(x)| >= delta]``.

    ``K`` is an array of grid ranks; ``flow_map(x, t)`` defaults to the
    integrator of :mod:`qsdlab.flow` applied to the kernel's mean field.
    """
    from .flow import flow_map as default_flow_map

    K = np.asarray(K, dtype=np.int64)
    N = kernel.N
    F = lambda x: mean_field(kernel.protocol, x)  # noqa: E731
    phi = flow_map or (lambda x, t: default_flow_map(F, x, t))
    pts = kernel.grid.points
    freq = np.empty(len(K))
    for k, s in enumerate(K):
        end = simulate_many(kernel, np.full(n_samples, s), N, seed, task_offset=k * n_samples)[:, -1]
        target = phi(pts[s], 1.0)
        dist = np.linalg.norm(pts[end] - target, axis=1)
        freq[k] = np.mean(dist >= delta)
    # Wilson score half-width at 95%
    z = 1.96
    n = n_samples
    half = z * np.sqrt(freq * (1 - freq) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    return BetaEstimate(float(freq.max(initial=0.0)), K, freq, half)


# ----------------------------------------------------------------------------
# external dump format
# ----------------------------------------------------------------------------

def write_kernel(kernel: TransitionKernel, path) -> None:
    """Matrix-market style coordinate dump with a ``d N protocol-hash`` header line."""
    M = kernel.matrix.tocoo()
    order = np.lexsort((M.col, M.row))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{kernel.d} {kernel.N} {kernel.protocol.digest()}\n")
        fh.write(f"{M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for k in order:
            fh.write(f"{M.row[k] + 1} {M.col[k] + 1} {float(M.data[k])!r}\n")


def read_kernel(path):
    """Inverse of :func:`write_kernel`; returns ``(d, N, digest, csr_matrix)``."""
    with open(path) as fh:
        fh.readline()
        d, N, digest = fh.readline().split()
        n, m, nnz = map(int, fh.readline().split())
        data = np.loadtxt(fh, ndmin=2) if nnz else np.empty((0, 3))
    M = sp.csr_matrix((data[:, 2], (data[:, 0].astype(int) - 1, data[:, 1].astype(int) - 1)),
                      shape=(n, m))
    return int(d), int(N), digest, M
