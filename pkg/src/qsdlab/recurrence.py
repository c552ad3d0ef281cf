"""Chain-recurrent classes on a coarse cell grid and exit-time sampling.

Two relations on the cells of ``Delta_M`` are supported: the cheap-cost
relation of the rate-function module and the absorption-preserving
pseudo-orbit relation built here from flow maps.  Both are reduced to
strongly connected components; a component is a class when it contains a
cycle (size at least two, or a self-edge), and a class is a quasi-attractor
when no other class is reachable from it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components
from scipy.spatial import cKDTree

from .kernel import TransitionKernel, hitting_samples
from .simplex import SimplexGrid, cell_width, enumerate_grid
from .flow import flow_samples

AP_DELTA_CELLS = 2.0
AP_T = 50.0
AP_T_MAX = 100.0


@dataclass(frozen=True)
class RecurrenceAtlas:
    flavor: str                       # "L" or "AP"
    d: int
    M: int
    classes: list                     # sorted rank arrays in Delta_M
    order: list                       # (a, b): class b is reachable from class a
    quasi_attractor_flags: list
    parameters: dict = field(default_factory=dict)

    @property
    def grid(self) -> SimplexGrid:
        return enumerate_grid(self.d, self.M)

    def quasi_attractors(self) -> list:
        return [c for c, f in zip(self.classes, self.quasi_attractor_flags) if f]

    def to_dict(self) -> dict:
        return {
            "flavor": self.flavor, "d": self.d, "M": self.M,
            "classes": [[int(r) for r in c] for c in self.classes],
            "order": [[int(a), int(b)] for a, b in self.order],
            "quasi_attractor_flags": [bool(f) for f in self.quasi_attractor_flags],
            "parameters": self.parameters,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, obj) -> "RecurrenceAtlas":
        return cls(obj["flavor"], int(obj["d"]), int(obj["M"]),
                   [np.asarray(c, dtype=np.int64) for c in obj["classes"]],
                   [tuple(p) for p in obj["order"]], list(obj["quasi_attractor_flags"]),
                   dict(obj.get("parameters", {})))


def atlas_from_relation(relation, self_loops, flavor: str, d: int, M: int,
                        parameters: dict | None = None) -> RecurrenceAtlas:
    """Classes, reachability order and maximal classes of a relation on the cells of ``Delta_M``.

    ``relation`` is a square sparse matrix over all ranks (nonzero pattern =
    edges, explicit zeros count); ``self_loops`` marks cells related to
    themselves.  Classes are listed by smallest member rank, which makes the
    output independent of construction order.
    """
    R = sp.csr_matrix(relation, dtype=float)
    n = R.shape[0]
    R = sp.csr_matrix((np.ones(R.nnz), R.indices, R.indptr), shape=(n, n))
    loops = np.asarray(self_loops, dtype=bool) | (R.diagonal() > 0)
    _, labels = connected_components(R, directed=True, connection="strong")
    sizes = np.bincount(labels)
    recurrent = (sizes[labels] > 1) | loops
    comps = np.unique(labels[recurrent])
    members = {c: np.flatnonzero(labels == c) for c in comps}
    comps = sorted(comps, key=lambda c: members[c][0])
    classes = [members[c] for c in comps]
    index = {c: k for k, c in enumerate(comps)}

    order = []
    for k, c in enumerate(comps):
        reach = breadth_first_order(R, members[c][0], directed=True, return_predecessors=False)
        hit = {index[lab] for lab in np.unique(labels[reach]) if lab in index} - {k}
        order.extend((k, j) for j in sorted(hit))
    has_successor = {a for a, _ in order}
    flags = [k not in has_successor for k in range(len(classes))]
    return RecurrenceAtlas(flavor, d, M, classes, order, flags, dict(parameters or {}))


@dataclass(frozen=True)
class APGraph:
    grid: SimplexGrid
    adjacency: sp.csr_matrix
    delta: float
    T: float
    T_max: float
    dt: float

    def edges(self) -> np.ndarray:
        A = self.adjacency.tocoo()
        return np.column_stack([A.row, A.col])


def ap_graph(F, d: int, M: int, delta: float | None = None, T: float = AP_T,
             T_max: float = AP_T_MAX) -> APGraph:
    """Absorption-preserving pseudo-orbit graph on the cell centres of ``Delta_M``.

    ``u -> v`` when ``|phi_t(u) - v| < delta`` for some sampled
    ``t in [T, T_max]``, unless ``u`` lies on the boundary and ``v`` does not.
    Flow times are the multiples of ``dt = min(delta / (2 max|F|), 0.1)`` in
    that interval.
    """
    if not 0 < T < T_max:
        raise ValueError("need 0 < T < T_max")
    grid = enumerate_grid(d, M)
    width = cell_width(M)
    delta = AP_DELTA_CELLS * width if delta is None else float(delta)
    if delta < width - 1e-15:
        raise ValueError("delta must be at least one cell width")
    pts = grid.points
    fmax = float(np.linalg.norm(F(pts), axis=1).max())
    dt = 0.1 if fmax == 0 else min(delta / (2.0 * fmax), 0.1)
    # multiples of dt: equal spacings give nested sample sets for nested [T, T_max]
    j0 = int(np.ceil(T / dt - 1e-9))
    j1 = int(np.floor(T_max / dt + 1e-9))
    times = dt * np.arange(j0, j1 + 1)
    tree = cKDTree(pts)
    rows, cols = [], []
    traj = flow_samples(F, pts, times)
    for snap in traj:
        hits = tree.query_ball_point(snap, r=delta * (1 - 1e-12))
        for u, vs in enumerate(hits):
            rows.extend([u] * len(vs))
            cols.extend(vs)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    boundary = grid.boundary_mask
    keep = ~boundary[rows] | boundary[cols]
    A = sp.csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])),
                      shape=(grid.n_points, grid.n_points))
    A.data[:] = 1.0
    return APGraph(grid, A, delta, float(T), float(T_max), float(dt))


def ap_classes(graph: APGraph) -> RecurrenceAtlas:
    g = graph.grid
    params = {"delta": graph.delta, "T": graph.T, "T_max": graph.T_max, "dt": graph.dt}
    return atlas_from_relation(graph.adjacency, np.zeros(g.n_points, bool), "AP", g.d, g.N,
                               params)


def _hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    ta, tb = cKDTree(a), cKDTree(b)
    return float(max(tb.query(a)[0].max(), ta.query(b)[0].max()))


@dataclass(frozen=True)
class ClassMatch:
    l_index: int
    ap_index: int | None
    hausdorff_cells: float
    flags_agree: bool


@dataclass(frozen=True)
class AtlasComparison:
    matches: list
    unmatched_l: list
    unmatched_ap: list
    quasi_attractor_hausdorff_cells: float
    n_classes: tuple
    n_quasi_attractors: tuple

    @property
    def flags_agree(self) -> bool:
        return (all(m.flags_agree for m in self.matches)
                and self.n_quasi_attractors[0] == self.n_quasi_attractors[1])

    def to_dict(self) -> dict:
        return {
            "matches": [m.__dict__ for m in self.matches],
            "unmatched_l": self.unmatched_l, "unmatched_ap": self.unmatched_ap,
            "quasi_attractor_hausdorff_cells": self.quasi_attractor_hausdorff_cells,
            "n_classes": list(self.n_classes),
            "n_quasi_attractors": list(self.n_quasi_attractors),
            "flags_agree": self.flags_agree,
        }


def _restrict(atlas: RecurrenceAtlas, keep: np.ndarray):
    out = []
    for k, (c, f) in enumerate(zip(atlas.classes, atlas.quasi_attractor_flags)):
        c = c[keep[c]]
        if c.size:
            out.append((k, c, f))
    return out


def compare_atlases(atlas_l: RecurrenceAtlas, atlas_ap: RecurrenceAtlas,
                    alpha_margin: float | None = None) -> AtlasComparison:
    """Match the classes of two atlases on the cells with ``min_i x_i >= alpha_margin``.

    Each class of the first atlas is paired with the class of the second at
    smallest Hausdorff distance (in cell widths); a pairing farther than two
    cell widths counts as unmatched.
    """
    if (atlas_l.d, atlas_l.M) != (atlas_ap.d, atlas_ap.M):
        raise ValueError("atlases live on different grids")
    grid = atlas_l.grid
    width = cell_width(grid.N)
    margin = 1.0 / (2 * grid.N) if alpha_margin is None else alpha_margin
    keep = grid.points.min(axis=1) >= margin - 1e-12
    pts = grid.points
    L = _restrict(atlas_l, keep)
    A = _restrict(atlas_ap, keep)
    matches, used = [], set()
    unmatched_l = []
    for k, c, f in L:
        best = None
        for j, cj, fj in A:
            h = _hausdorff(pts[c], pts[cj]) / width
            if best is None or h < best[1]:
                best = (j, h, fj)
        if best is None or best[1] > 2.0 + 1e-9:
            unmatched_l.append(int(k))
            continue
        used.add(best[0])
        matches.append(ClassMatch(int(k), int(best[0]), float(best[1]), bool(f) == bool(best[2])))
    unmatched_ap = [int(j) for j, _, _ in A if j not in used]
    qa_l = [c for _, c, f in L if f]
    qa_a = [c for _, c, f in A if f]
    if qa_l and qa_a:
        h = _hausdorff(pts[np.concatenate(qa_l)], pts[np.concatenate(qa_a)]) / width
    else:
        h = 0.0 if not qa_l and not qa_a else float("inf")
    return AtlasComparison(matches, unmatched_l, unmatched_ap, float(h), (len(L), len(A)),
                           (len(qa_l), len(qa_a)))


@dataclass(frozen=True)
class ExitSamples:
    times: np.ndarray
    censored: np.ndarray
    start: int
    pilot_means: dict
    exceedance: dict

    def median(self) -> float:
        return float(np.median(self.times))


def exit_time_samples(kernel: TransitionKernel, class_points, eta: float, n_samples: int,
                      seed: int, step_cap: int = 10**8, thresholds=(), pilot: int = 100,
                      max_candidates: int = 64, threads: int | None = None) -> ExitSamples:
    """Exit times from the ``eta``-neighbourhood of a class, started at its slowest state.

    ``class_points`` are points of the simplex (for instance cell centres of
    a class).  Each candidate start in the neighbourhood gets ``pilot`` pilot
    samples; the full run starts from the one with the largest pilot mean.
    """
    grid = kernel.grid
    pts = grid.points
    dist, _ = cKDTree(np.atleast_2d(class_points)).query(pts)
    inside = (dist < eta) & ~grid.boundary_mask
    cand = np.flatnonzero(inside)
    if cand.size == 0:
        raise ValueError("the eta-neighbourhood contains no interior state")
    if cand.size > max_candidates:
        cand = cand[np.linspace(0, cand.size - 1, max_candidates).round().astype(int)]
    means = {}
    for k, r in enumerate(cand):
        s = hitting_samples(kernel, inside, [r], [1.0], pilot, seed + 1 + k, step_cap,
                            threads)
        means[int(r)] = float(np.mean(s.times))
    start = max(means, key=lambda r: (means[r], -r))
    s = hitting_samples(kernel, inside, [start], [1.0], n_samples, seed, step_cap, threads)
    exceed = {float(t): float(np.mean(s.times > t)) for t in thresholds}
    return ExitSamples(s.times, s.censored, start, means, exceed)
