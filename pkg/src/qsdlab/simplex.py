"""The discrete simplex Delta_N: enumeration, ranking and neighborhoods.

Points are stored as integer count vectors ``n`` with ``n.sum() == N``;
real coordinates ``x = n / N`` are a derived view.  Points are ordered
lexicographically on the count vector (first strategy most significant),
so the vertex carrying all mass on the last strategy has rank 0.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.spatial import cKDTree

from .errors import CapExceeded, InvalidDimension, NotOnGrid

DEFAULT_CAP = 2_000_000


@dataclass(frozen=True, eq=False)
class SimplexGrid:
    """Lattice points of the simplex with step ``1/N`` in ``d`` strategies.

    Attributes
    ----------
    d, N : int
        Strategy count and population size.
    counts : ndarray, shape (n_points, d)
        Integer count vectors in lexicographic order.
    interior_index : ndarray
        Ranks of the points with every count positive, ascending.
    """

    d: int
    N: int
    counts: np.ndarray = field(repr=False)
    interior_index: np.ndarray = field(repr=False)
    _binom: np.ndarray = field(repr=False)

    @property
    def n_points(self) -> int:
        return self.counts.shape[0]

    @property
    def n_interior(self) -> int:
        return self.interior_index.shape[0]

    @property
    def points(self) -> np.ndarray:
        """Real coordinates of every grid point."""
        return self.counts / self.N

    @property
    def boundary_mask(self) -> np.ndarray:
        return (self.counts == 0).any(axis=1)

    @property
    def interior_position(self) -> np.ndarray:
        """Map full rank -> position in ``interior_index`` (-1 on the boundary)."""
        pos = np.full(self.n_points, -1, dtype=np.int64)
        pos[self.interior_index] = np.arange(self.n_interior)
        return pos

    def rank_many(self, counts) -> np.ndarray:
        """Vectorised rank of an ``(m, d)`` array of count vectors."""
        n = np.atleast_2d(np.asarray(counts, dtype=np.int64))
        if n.shape[1] != self.d:
            raise NotOnGrid(f"expected {self.d} coordinates, got {n.shape[1]}")
        if (n < 0).any() or (n.sum(axis=1) != self.N).any():
            raise NotOnGrid("count vectors must be nonnegative and sum to N")
        C = self._binom
        remaining = np.full(n.shape[0], self.N, dtype=np.int64)
        r = np.zeros(n.shape[0], dtype=np.int64)
        for k in range(self.d - 1):
            m = self.d - k - 1
            # number of completions that put fewer than n_k at position k
            r += C[remaining + m, m] - C[remaining - n[:, k] + m, m]
            remaining -= n[:, k]
        return r


def _binomial_table(top: int, width: int) -> np.ndarray:
    table = np.zeros((top + 1, width + 1), dtype=np.int64)
    for a in range(top + 1):
        for b in range(min(a, width) + 1):
            table[a, b] = comb(a, b)
    return table


def n_points(d: int, N: int) -> int:
    return comb(N + d - 1, d - 1)


def n_interior_points(d: int, N: int) -> int:
    return comb(N - 1, d - 1) if N >= d else 0


def enumerate_grid(d: int, N: int, cap: int = DEFAULT_CAP) -> SimplexGrid:
    """Enumerate Delta_N in lexicographic count order.

    Raises
    ------
    InvalidDimension
        If ``d < 2`` or ``N < 2``.
    CapExceeded
        If the number of points exceeds ``cap``.
    """
    if int(d) != d or int(N) != N or d < 2 or N < 2:
        raise InvalidDimension(f"need integers d >= 2 and N >= 2, got d={d}, N={N}")
    d, N = int(d), int(N)
    total = n_points(d, N)
    if total > cap:
        raise CapExceeded(f"{total} states exceed the cap of {cap}")
    # stars and bars: lexicographic bar positions give lexicographic counts
    bars = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(N + d - 1), d - 1)),
        dtype=np.int64,
        count=total * (d - 1),
    ).reshape(total, d - 1)
    edges = np.hstack([np.full((total, 1), -1), bars, np.full((total, 1), N + d - 1)])
    counts = np.diff(edges, axis=1) - 1
    interior = np.flatnonzero((counts > 0).all(axis=1))
    counts.setflags(write=False)
    interior.setflags(write=False)
    return SimplexGrid(d, N, counts, interior, _binomial_table(N + d, d))


def _as_counts(grid: SimplexGrid, point) -> np.ndarray:
    p = np.asarray(point)
    if p.shape != (grid.d,):
        raise NotOnGrid(f"point {point!r} has wrong shape for d={grid.d}")
    if np.issubdtype(p.dtype, np.integer):
        n = p.astype(np.int64)
    else:
        n = np.rint(p * grid.N).astype(np.int64)
        if not np.allclose(n / grid.N, p, rtol=0.0, atol=1e-12):
            raise NotOnGrid(f"point {point!r} is not a multiple of 1/{grid.N}")
    if (n < 0).any() or n.sum() != grid.N:
        raise NotOnGrid(f"point {point!r} is not on Delta_{grid.N}")
    return n


def rank(grid: SimplexGrid, point) -> int:
    """Position of ``point`` (integer counts, or real coordinates) in the grid."""
    return int(grid.rank_many(_as_counts(grid, point)[None, :])[0])


def unrank(grid: SimplexGrid, index: int) -> np.ndarray:
    if not 0 <= index < grid.n_points:
        raise NotOnGrid(f"index {index} outside [0, {grid.n_points})")
    return grid.counts[index].copy()


def is_boundary(point) -> bool:
    """True iff some coordinate vanishes (counts or real coordinates)."""
    return bool((np.asarray(point) == 0).any())


def neighbor_moves(grid: SimplexGrid, point) -> list[tuple[int, int]]:
    """Ordered pairs ``(i, j)`` (0-based) such that ``x + (e_j - e_i)/N`` stays on the grid."""
    n = _as_counts(grid, point)
    return [(i, j) for i in range(grid.d) if n[i] >= 1 for j in range(grid.d) if j != i]


def epsilon_neighborhood(grid: SimplexGrid, target, eps: float) -> np.ndarray:
    """Ranks of grid points at Euclidean distance ``< eps`` from ``target``.

    ``target`` is a single point or an ``(m, d)`` array of points, in real
    coordinates.
    """
    t = np.atleast_2d(np.asarray(target, dtype=float))
    tree = cKDTree(grid.points)
    hits = set()
    for pts in tree.query_ball_point(t, r=eps):
        hits.update(pts)
    if not hits:
        return np.empty(0, dtype=np.int64)
    idx = np.array(sorted(hits), dtype=np.int64)
    # query_ball_point is inclusive; enforce the strict inequality
    dist, _ = cKDTree(t).query(grid.points[idx])
    return idx[dist < eps]


def cell_width(M: int) -> float:
    """Euclidean distance between adjacent lattice points of Delta_M."""
    return np.sqrt(2.0) / M


def nearest_counts(x, N: int) -> np.ndarray:
    """Round points of the simplex to count vectors summing to ``N`` (largest remainder)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x = np.clip(x, 0.0, None)
    x = x / x.sum(axis=1, keepdims=True)
    scaled = x * N
    base = np.floor(scaled).astype(np.int64)
    short = N - base.sum(axis=1)
    order = np.argsort(-(scaled - base), axis=1, kind="stable")
    bump = np.arange(x.shape[1])[None, :] < short[:, None]
    rows = np.repeat(np.arange(x.shape[0])[:, None], x.shape[1], axis=1)
    base[rows, order] += bump
    return base
