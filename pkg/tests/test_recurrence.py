import json

import numpy as np
import pytest
import scipy.sparse as sp

from qsdlab.kernel import assemble
from qsdlab.ldp import RateFunctional, build_cost_graph, l_classes
from qsdlab.flow import find_attractor
from qsdlab.protocols import CustomTable, mean_field, rock_paper_scissors, replicator_field
from qsdlab.recurrence import (RecurrenceAtlas, ap_classes, ap_graph, atlas_from_relation,
                               compare_atlases, exit_time_samples)
from qsdlab.simplex import cell_width, enumerate_grid, rank


def zero_field(x):
    return np.zeros_like(np.atleast_2d(x))


def field(protocol):
    return lambda x: mean_field(protocol, x)


@pytest.fixture(scope="module")
def hd_graph(hd):
    return ap_graph(field(hd), 2, 60)


def test_zero_field_edges_are_the_delta_relation():
    M = 12
    g = ap_graph(zero_field, 3, M, T=1.0, T_max=2.0)
    pts = g.grid.points
    D = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    b = g.grid.boundary_mask
    # lattice distances equal to delta count as outside
    expected = (D < g.delta * (1 - 1e-9)) & (~b[:, None] | b[None, :])
    assert np.array_equal(g.adjacency.toarray() > 0, expected)


def test_hawk_dove_ap_graph(hd_graph):
    g = hd_graph
    A = g.adjacency.tocsr()
    star = rank(g.grid, (30, 30))
    assert A[star, star] > 0
    reach = sp.csgraph.breadth_first_order(A, star, return_predecessors=False)
    for u in g.grid.interior_index:
        order = sp.csgraph.breadth_first_order(A, u, return_predecessors=False)
        assert star in order
    assert set(reach) <= set(g.grid.interior_index) | set(np.flatnonzero(g.grid.boundary_mask))
    for v in (0, g.grid.n_points - 1):
        targets = A[v].indices
        assert g.grid.boundary_mask[targets].all()


def test_absorption_constraint_audit(hd_graph, grps):
    for g in (hd_graph, ap_graph(field(grps), 3, 16)):
        e = g.edges()
        b = g.grid.boundary_mask
        assert not (b[e[:, 0]] & ~b[e[:, 1]]).any()


def test_hawk_dove_ap_classes(hd_graph):
    atlas = ap_classes(hd_graph)
    g = hd_graph.grid
    interior = [c for c in atlas.classes if not g.boundary_mask[c].any()]
    assert len(interior) == 1
    pts = g.points[interior[0]]
    assert np.abs(pts[:, 0] - 0.5).max() <= 2 * cell_width(60)
    k = [i for i, c in enumerate(atlas.classes) if c is interior[0]][0]
    assert atlas.quasi_attractor_flags[k]
    vertices = {0, g.n_points - 1}
    assert {int(c[0]) for c in atlas.classes if g.boundary_mask[c].all()} == vertices


def test_two_sink_ap_classes(two_sink):
    atlas = ap_classes(ap_graph(field(two_sink), 2, 60))
    g = enumerate_grid(2, 60)
    inner = [(c, f) for c, f in zip(atlas.classes, atlas.quasi_attractor_flags)
             if not g.boundary_mask[c].any()]
    centers = [g.points[c][:, 0].mean() for c, _ in inner]
    assert np.allclose(centers, [0.25, 0.5, 0.75], atol=2 / 60)
    assert [f for _, f in inner] == [True, False, True]


def test_large_delta_single_interior_class(hd):
    atlas = ap_classes(ap_graph(field(hd), 2, 20, delta=2.0))
    g = enumerate_grid(2, 20)
    assert len(atlas.classes) == 2
    assert atlas.classes[0].tolist() == [0, 20]
    assert atlas.classes[1].tolist() == g.interior_index.tolist()
    assert atlas.quasi_attractor_flags == [True, False]


def test_parameter_checks(hd):
    with pytest.raises(ValueError):
        ap_graph(field(hd), 2, 20, T=5.0, T_max=5.0)
    with pytest.raises(ValueError):
        ap_graph(field(hd), 2, 20, delta=0.5 * cell_width(20))


def test_monotone_in_delta_and_T(grps):
    F = field(grps)
    base = ap_graph(F, 3, 16, delta=2 * cell_width(16), T=5.0, T_max=15.0)
    wider = ap_graph(F, 3, 16, delta=3 * cell_width(16), T=5.0, T_max=15.0)
    earlier = ap_graph(F, 3, 16, delta=2 * cell_width(16), T=2.0, T_max=15.0)
    for bigger in (wider, earlier):
        assert base.dt == bigger.dt
        assert ((base.adjacency > 0).astype(int) - (bigger.adjacency > 0).astype(int)).max() <= 0
        assert bigger.adjacency.nnz > base.adjacency.nnz


def test_atlas_relation_and_order():
    # 0 <-> 1 -> 2 (self loop), 3 alone without loop, 4 -> 4 and 4 -> 0
    rows = [0, 1, 1, 2, 4, 4]
    cols = [1, 0, 2, 2, 4, 0]
    R = sp.csr_matrix((np.ones(6), (rows, cols)), shape=(5, 5))
    atlas = atlas_from_relation(R, np.zeros(5, bool), "AP", 2, 4)
    assert [c.tolist() for c in atlas.classes] == [[0, 1], [2], [4]]
    assert sorted(atlas.order) == [(0, 1), (2, 0), (2, 1)]
    assert atlas.quasi_attractor_flags == [False, True, False]
    assert [c.tolist() for c in atlas.quasi_attractors()] == [[2]]


def test_atlas_independent_of_edge_order():
    rng = np.random.default_rng(0)
    n = 40
    coo = sp.random(n, n, density=0.06, random_state=1, format="coo")
    a = atlas_from_relation(coo.tocsr(), np.zeros(n, bool), "L", 2, n - 1)
    order = rng.permutation(coo.nnz)
    B = sp.csr_matrix((np.ones(coo.nnz), (coo.row[order], coo.col[order])), shape=(n, n))
    b = atlas_from_relation(B, np.zeros(n, bool), "L", 2, n - 1)
    assert a.to_dict() == b.to_dict()


def test_atlas_json_roundtrip(tmp_path, hd_graph):
    atlas = ap_classes(hd_graph)
    text = atlas.to_json(tmp_path / "a.json")
    again = RecurrenceAtlas.from_dict(json.loads(text))
    assert again.to_dict() == atlas.to_dict()
    assert (tmp_path / "a.json").read_text().strip() == text


def test_compare_identical(hd_graph):
    atlas = ap_classes(hd_graph)
    rep = compare_atlases(atlas, atlas)
    assert rep.unmatched_l == [] and rep.unmatched_ap == []
    assert all(m.hausdorff_cells == 0.0 for m in rep.matches)
    assert rep.quasi_attractor_hausdorff_cells == 0.0
    assert rep.flags_agree
    with pytest.raises(ValueError):
        compare_atlases(atlas, ap_classes(ap_graph(zero_field, 2, 20)))


def test_compare_hawk_dove(hd, hd_graph):
    rf = RateFunctional(hd)
    atlas_l = l_classes(build_cost_graph(rf, 60), rf=rf)
    rep = compare_atlases(atlas_l, ap_classes(hd_graph))
    assert rep.n_classes == (1, 1)
    assert rep.quasi_attractor_hausdorff_cells <= 2.0 + 1e-9
    assert rep.flags_agree


def test_attractor_inside_ap_quasi_attractor():
    M = 16
    F = lambda x: replicator_field(rock_paper_scissors(), x)  # noqa: E731
    seeds = enumerate_grid(3, M).points[enumerate_grid(3, M).interior_index]
    rep = find_attractor(F, seeds, M)
    atlas = ap_classes(ap_graph(F, 3, M))
    qa = set(np.concatenate(atlas.quasi_attractors()).tolist())
    assert set(rep.attractor_cells.tolist()) <= qa


def test_exit_certain():
    p = CustomTable(2, {(0, 1): "2*x1*x2", (1, 0): "2*x1*x2"}, scale=1.0)
    k = assemble(p, enumerate_grid(2, 2))
    s = exit_time_samples(k, np.array([[0.5, 0.5]]), 0.1, 100, seed=1, pilot=5)
    assert (s.times == 1).all()
    with pytest.raises(ValueError):
        exit_time_samples(k, np.array([[1.0, 0.0]]), 0.1, 10, seed=1)


def test_exit_times_grow_at_the_attractor(hd):
    medians = []
    for N in (20, 40, 60):
        k = assemble(hd, enumerate_grid(2, N))
        s = exit_time_samples(k, np.array([[0.5, 0.5]]), 0.1, 400, seed=2, pilot=50,
                              thresholds=(10, 100))
        medians.append(s.median())
        assert s.start in k.grid.interior_index
        assert set(s.exceedance) == {10.0, 100.0}
    assert medians[0] < medians[1] < medians[2]


def test_saddle_exit_subexponential(two_sink):
    def median(N, point, eta):
        k = assemble(two_sink, enumerate_grid(2, N))
        return exit_time_samples(k, np.array([point]), eta, 400, seed=3, pilot=50).median()

    # escape from the sink over the barrier toward the saddle fixes the exponential scale
    sink = [median(N, [0.25, 0.75], 0.3) for N in (40, 80)]
    c = np.log(sink[1] / sink[0]) / 40
    saddle = [median(N, [0.5, 0.5], 0.1) for N in (40, 80)]
    assert c > 0.05
    assert saddle[1] / saddle[0] < 0.2 * np.exp(c * 40)
