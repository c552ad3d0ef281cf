"""Large-deviation costs of the imitation chain.

The one-step jump law at ``x`` puts mass ``p_ij(x)`` on ``e_j - e_i`` and the
remaining mass on ``0``.  Its log moment generating function ``H(x, alpha)``
and the Legendre transform ``L(x, beta)`` give the action of a path; a coarse
cell graph with travel-optimised edge costs turns the quasipotential into a
shortest-path problem.

Only the sum-zero part of ``alpha`` matters (every jump sums to zero), so the
Legendre transform is maximised over an orthonormal basis of that subspace.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import null_space
from scipy.optimize import linprog
from scipy.sparse.csgraph import dijkstra

from .flow import interior_equilibria
from .protocols import RevisionProtocol, mean_field
from .recurrence import RecurrenceAtlas, atlas_from_relation
from .simplex import SimplexGrid, enumerate_grid

INF_COST = 1e9
DIVERGENCE = 1e6
GRAD_TOL = 1e-10
TAU_BOUNDS = (0.05, 50.0)
_GAUSS3 = np.polynomial.legendre.leggauss(3)


class RateFunctional:
    """Jump law, log-MGF and local rate of a protocol's chain.

    Parameters
    ----------
    protocol : RevisionProtocol
    grad_tol : float
        Newton stops once the reduced gradient norm is below this value.
    max_newton : int
        Iteration cap before falling back to a convex-hull membership test.
    """

    def __init__(self, protocol: RevisionProtocol, grad_tol: float = GRAD_TOL,
                 max_newton: int = 200):
        self.protocol = protocol
        self.d = d = protocol.d
        self.grad_tol = grad_tol
        self.max_newton = max_newton
        pairs = [(i, j) for i in range(d) for j in range(d) if i != j]
        self.pairs = np.array(pairs, dtype=np.int64)
        eye = np.eye(d)
        self.Y = np.array([eye[j] - eye[i] for i, j in pairs])
        self.basis = null_space(np.ones((1, d)))  # (d, d-1), orthonormal

    def field(self, x) -> np.ndarray:
        return mean_field(self.protocol, x)

    def weights(self, x):
        """Jump probabilities ``(n, K)`` aligned with ``self.Y`` and the stay mass ``(n,)``."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        P = self.protocol.rates(X)
        W = np.clip(P[:, self.pairs[:, 0], self.pairs[:, 1]], 0.0, None)
        stay = np.clip(1.0 - W.sum(axis=1), 0.0, None)
        return W, stay

    # log-MGF and its derivatives on precomputed weights ------------------

    def _tilt(self, W, stay, alpha):
        z = alpha @ self.Y.T
        zmask = np.where(W > 0, z, -np.inf)
        m = np.maximum(zmask.max(axis=1), np.where(stay > 0, 0.0, -np.inf))
        m = np.where(np.isfinite(m), m, 0.0)
        e = W * np.exp(np.minimum(z - m[:, None], 700.0))
        e0 = stay * np.exp(-m)
        S = e.sum(axis=1) + e0
        return m + np.log(S), e / S[:, None]

    def _H(self, W, stay, alpha):
        return self._tilt(W, stay, alpha)[0]

    def _legendre(self, W, stay, beta):
        """Batched ``sup_alpha <alpha, beta> - H`` with damped Newton on the sum-zero basis."""
        n = W.shape[0]
        B = self.basis
        out = np.zeros(n)
        bad = np.abs(beta.sum(axis=1)) > 1e-12
        out[bad] = INF_COST
        a = np.zeros((n, B.shape[1]))
        H0 = self._H(W, stay, a @ B.T)
        f = (a @ B.T * beta).sum(axis=1) - H0
        active = np.flatnonzero(~bad)
        stalled = np.zeros(n, dtype=bool)
        for _ in range(self.max_newton):
            if active.size == 0:
                break
            Wa, sa, ba, aa = W[active], stay[active], beta[active], a[active]
            alpha = aa @ B.T
            H, w = self._tilt(Wa, sa, alpha)
            mean = w @ self.Y
            g = (ba - mean) @ B
            gnorm = np.linalg.norm(g, axis=1)
            done = gnorm <= self.grad_tol
            div = f[active] > DIVERGENCE
            out[active[div]] = INF_COST
            out[active[done & ~div]] = f[active[done & ~div]]
            keep = ~(done | div)
            active, g, w, mean, aa = active[keep], g[keep], w[keep], mean[keep], aa[keep]
            if active.size == 0:
                break
            Yb = self.Y @ B                                   # (K, d-1)
            C = np.einsum("nk,ka,kb->nab", w, Yb, Yb)
            mb = mean @ B
            C -= mb[:, :, None] * mb[:, None, :]
            lam = 1e-12 * (1.0 + np.trace(C, axis1=1, axis2=2))
            C += lam[:, None, None] * np.eye(B.shape[1])
            step = np.linalg.solve(C, g[:, :, None])[:, :, 0]
            slope = (g * step).sum(axis=1)
            # Newton decrement below rounding of f: converged at double precision
            tiny = slope <= 1e-16 * np.maximum(np.abs(f[active]), 1e-8)
            out[active[tiny]] = f[active[tiny]]
            active, g, aa, step, slope = (active[~tiny], g[~tiny], aa[~tiny], step[~tiny],
                                          slope[~tiny])
            if active.size == 0:
                break
            t = np.ones(active.size)
            f_old = f[active]
            accepted = np.zeros(active.size, dtype=bool)
            for _ in range(40):
                trial = aa + t[:, None] * step
                ft = (trial @ B.T * beta[active]).sum(axis=1) - self._H(
                    W[active], stay[active], trial @ B.T)
                # in the quadratic region the full step is taken: the Armijo test
                # cannot resolve gains at the rounding level of f
                ok = ~accepted & ((ft >= f_old + 1e-4 * t * slope) | ((slope < 1e-12) & (t == 1)))
                a[active[ok]] = trial[ok]
                f[active[ok]] = ft[ok]
                accepted |= ok
                if accepted.all():
                    break
                t = np.where(accepted, t, 0.5 * t)
            # no ascent possible at double precision: the current value is the sup,
            # unless alpha has run off (beta on or beyond the edge of the jump hull)
            flat = ~accepted
            out[active[flat]] = f[active[flat]]
            far = flat & (np.linalg.norm(aa, axis=1) > 30.0)
            stalled[active[far]] = True
            active = active[accepted]
        # iteration cap: either beta is outside the jump hull or the sup sits at infinity
        for k in np.concatenate([active, np.flatnonzero(stalled)]).astype(np.int64):
            if out[k] >= INF_COST:
                continue
            if f[k] > DIVERGENCE or not self._in_hull(W[k], stay[k], beta[k]):
                out[k] = INF_COST
            else:
                out[k] = max(f[k], 0.0)
        return np.clip(out, 0.0, None)

    def _in_hull(self, w, stay, beta, tol=1e-9) -> bool:
        pts = self.Y[w > 0]
        if stay > 0:
            pts = np.vstack([pts, np.zeros(self.d)])
        if len(pts) == 0:
            return False
        k = len(pts)
        res = linprog(np.zeros(k), A_eq=np.vstack([pts.T, np.ones((1, k))]),
                      b_eq=np.append(beta, 1.0), bounds=[(0, None)] * k, method="highs")
        if res.status != 0:
            return False
        return bool(np.abs(pts.T @ res.x - beta).max() <= tol)


def _tangent(v):
    v = np.asarray(v, dtype=float)
    return v - v.mean(axis=-1, keepdims=True)


def log_mgf(rf: RateFunctional, x, alpha) -> np.ndarray | float:
    """``H(x, alpha) = log(sum_ij p_ij e^{<alpha, e_j - e_i>} + stay)`` (batched over rows)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    A = np.atleast_2d(_tangent(alpha))
    W, stay = rf.weights(X)
    A = np.broadcast_to(A, (W.shape[0], rf.d))
    H = rf._H(W, stay, A)
    return float(H[0]) if np.ndim(x) == 1 and np.ndim(alpha) == 1 else H


def grad_log_mgf(rf: RateFunctional, x, alpha) -> np.ndarray:
    """Tilted mean jump, the gradient of ``H`` in ``alpha``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    A = np.atleast_2d(_tangent(alpha))
    W, stay = rf.weights(X)
    _, w = rf._tilt(W, stay, np.broadcast_to(A, (W.shape[0], rf.d)))
    G = w @ rf.Y
    return G[0] if np.ndim(x) == 1 and np.ndim(alpha) == 1 else G


def local_rate(rf: RateFunctional, x, beta) -> np.ndarray | float:
    """``L(x, beta) = sup_alpha <alpha, beta> - H(x, alpha)``; :data:`INF_COST` when infinite."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Bt = np.atleast_2d(np.asarray(beta, dtype=float))
    W, stay = rf.weights(X)
    Bt = np.broadcast_to(Bt, (W.shape[0], rf.d)).copy()
    L = rf._legendre(W, stay, Bt)
    return float(L[0]) if np.ndim(x) == 1 and np.ndim(beta) == 1 else L


def path_cost(rf: RateFunctional, times, points) -> float:
    """Action of the piecewise-linear path through ``points`` at knot ``times``.

    Each segment is integrated with 3-node Gauss-Legendre quadrature; any
    infinite local rate makes the whole cost :data:`INF_COST`.
    """
    t = np.asarray(times, dtype=float)
    P = np.asarray(points, dtype=float)
    if len(t) != len(P) or np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing and match the points")
    if len(t) < 2:
        return 0.0
    dt = np.diff(t)
    vel = np.diff(P, axis=0) / dt[:, None]
    nodes, wq = _GAUSS3
    s = 0.5 * (nodes + 1.0)
    X = (P[:-1, None, :] + s[None, :, None] * np.diff(P, axis=0)[:, None, :]).reshape(-1, rf.d)
    V = np.repeat(vel, len(s), axis=0)
    L = local_rate(rf, X, V).reshape(len(dt), len(s))
    if (L >= DIVERGENCE).any():
        return INF_COST
    return float(np.sum(dt * (0.5 * L @ wq)))


@dataclass(frozen=True)
class CostGraph:
    grid: SimplexGrid
    src: np.ndarray
    dst: np.ndarray
    cost: np.ndarray
    tau: np.ndarray
    nodes: np.ndarray        # boolean mask of cells inside the margin
    along_flow: np.ndarray   # edge indices that best follow F at their source
    alpha_margin: float

    @property
    def matrix(self) -> sp.csr_matrix:
        n = self.grid.n_points
        return sp.csr_matrix((self.cost, (self.src, self.dst)), shape=(n, n))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src_rank", "dst_rank", "cost", "tau_opt"])
            for row in zip(self.src, self.dst, self.cost, self.tau):
                w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3]))])


def _golden_min(fun, lo, hi, rel_width):
    """Vectorised golden-section minimisation of ``fun(tau)`` on ``[lo, hi]`` per row."""
    r = (np.sqrt(5.0) - 1.0) / 2.0
    n = len(lo)
    a, b = lo.copy(), hi.copy()
    c, e = b - r * (b - a), a + r * (b - a)
    fc, fe = fun(c), fun(e)
    target = rel_width * (hi - lo)
    while np.any(b - a > target):
        left = fc <= fe
        # left: keep [a, e], old c becomes the new e; right: keep [c, b], old e becomes c
        a, b = np.where(left, a, c), np.where(left, e, b)
        c_new = np.where(left, b - r * (b - a), e)
        e_new = np.where(left, c, a + r * (b - a))
        fp = fun(np.where(left, c_new, e_new))
        fc, fe = np.where(left, fp, fe), np.where(left, fc, fp)
        c, e = c_new, e_new
    cand = np.column_stack([c, e, lo, hi])
    vals = np.column_stack([fc, fe, fun(lo), fun(hi)])
    k = np.argmin(vals, axis=1)
    return vals[np.arange(n), k], cand[np.arange(n), k]


def build_cost_graph(rf: RateFunctional, M: int, tau_bounds=TAU_BOUNDS,
                     alpha_margin: float | None = None, rel_width: float = 1e-4) -> CostGraph:
    """Directed graph on the cells of ``Delta_M`` with travel-optimised edge costs.

    The cost of ``u -> v`` is ``min_tau tau * L(m, (v - u) / tau)`` at the
    midpoint ``m``; cells with ``min_i x_i < alpha_margin`` (default
    ``1 / (2M)``) are left out, as are edges of infinite cost.
    """
    if M < 10:
        raise ValueError("M must be at least 10")
    lo, hi = float(tau_bounds[0]), float(tau_bounds[1])
    if not 0 < lo < hi:
        raise ValueError("need 0 < tau_min < tau_max")
    d = rf.d
    margin = 1.0 / (2 * M) if alpha_margin is None else float(alpha_margin)
    grid = enumerate_grid(d, M)
    pts = grid.points
    nodes = pts.min(axis=1) >= margin - 1e-12
    src, dst = [], []
    counts = grid.counts
    for i, j in rf.pairs:
        ok = nodes & (counts[:, i] > 0)
        u = np.flatnonzero(ok)
        moved = counts[u].copy()
        moved[:, i] -= 1
        moved[:, j] += 1
        v = grid.rank_many(moved)
        keep = nodes[v]
        src.append(u[keep])
        dst.append(v[keep])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    mid = 0.5 * (pts[src] + pts[dst])
    dx = pts[dst] - pts[src]
    W, stay = rf.weights(mid)

    def cost_at(tau):
        return tau * rf._legendre(W, stay, dx / tau[:, None])

    n = len(src)
    cost, tau = _golden_min(cost_at, np.full(n, lo), np.full(n, hi), rel_width)
    finite = cost < DIVERGENCE
    src, dst, cost, tau, dx = src[finite], dst[finite], cost[finite], tau[finite], dx[finite]

    F = rf.field(pts[src])
    speed = np.linalg.norm(F, axis=1)
    cosine = np.where(speed > 0, (dx * F).sum(axis=1)
                      / (np.linalg.norm(dx, axis=1) * np.where(speed > 0, speed, 1.0)), -np.inf)
    along = []
    for s in np.unique(src):
        idx = np.flatnonzero(src == s)
        k = idx[np.argmax(cosine[idx])]
        if np.isfinite(cosine[k]) and cosine[k] > 0:
            along.append(k)
    return CostGraph(grid, src, dst, cost, tau, nodes, np.asarray(along, dtype=np.int64), margin)


def quasipotential(graph: CostGraph, sources, targets) -> float:
    """Cheapest graph path from any source cell to any target cell (``INF_COST`` if none)."""
    sources = np.unique(np.asarray(sources, dtype=np.int64))
    targets = np.unique(np.asarray(targets, dtype=np.int64))
    if sources.size == 0 or targets.size == 0:
        raise ValueError("source and target sets must be nonempty")
    if np.intersect1d(sources, targets).size:
        return 0.0
    dist = dijkstra(graph.matrix, directed=True, indices=sources, min_only=True)
    best = float(dist[targets].min())
    return best if np.isfinite(best) else INF_COST


EPS_FLOOR = 1e-8


def default_eps_class(graph: CostGraph, factor: float = 1.0, percentile: float = 50.0) -> float:
    """``factor`` times a percentile of the costs of the edges that best follow the flow.

    Those costs measure how far lattice directions are from the flow
    direction, i.e. discretisation noise rather than barriers.  The result
    is floored at :data:`EPS_FLOOR` so numerically zero costs still relate.
    """
    if graph.along_flow.size == 0:
        return EPS_FLOOR
    return max(factor * float(np.percentile(graph.cost[graph.along_flow], percentile)), EPS_FLOOR)


def hold_cells(rf: RateFunctional, graph: CostGraph) -> np.ndarray:
    """Cells nearest to each interior equilibrium of the mean field (within the margin)."""
    eq = interior_equilibria(rf.field, rf.d, graph.grid.N)
    nodes = np.flatnonzero(graph.nodes)
    if eq.size == 0 or nodes.size == 0:
        return np.empty(0, dtype=np.int64)
    pts = graph.grid.points[nodes]
    out = set()
    for x in eq:
        dist = np.linalg.norm(pts - x, axis=1)
        out.update(nodes[np.flatnonzero(dist <= dist.min() + 1e-12)].tolist())
    return np.array(sorted(out), dtype=np.int64)


def l_classes(graph: CostGraph, eps_class: float | None = None, rf: RateFunctional | None = None,
              holds=None) -> RecurrenceAtlas:
    """Classes of the relation ``u -> v`` iff ``B(u, v) <= eps_class``.

    A cell is related to itself when a cheap cycle returns to it or when it
    is the cell nearest to an interior equilibrium (the flow can hold there
    at no cost).  ``holds`` overrides that cell list; otherwise it is
    computed from ``rf``.
    """
    eps = default_eps_class(graph) if eps_class is None else float(eps_class)
    if eps <= 0:
        raise ValueError("eps_class must be positive")
    if holds is None:
        holds = hold_cells(rf, graph) if rf is not None else np.empty(0, dtype=np.int64)
    n = graph.grid.n_points
    nodes = np.flatnonzero(graph.nodes)
    dist = dijkstra(graph.matrix, directed=True, indices=nodes, limit=eps * (1 + 1e-12))
    rows, cols = np.nonzero(dist[:, nodes] <= eps)
    rows, cols = nodes[rows], nodes[cols]
    off = rows != cols
    R = sp.csr_matrix((np.ones(off.sum()), (rows[off], cols[off])), shape=(n, n))
    loops = np.zeros(n, dtype=bool)
    loops[np.asarray(holds, dtype=np.int64)] = True
    params = {"eps_class": eps, "alpha_margin": graph.alpha_margin,
              "hold_cells": [int(h) for h in holds]}
    return atlas_from_relation(R, loops, "L", graph.grid.d, graph.grid.N, params)
