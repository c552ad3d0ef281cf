import csv
import dataclasses

import numpy as np
import pytest

from qsdlab.flow import integrate
from qsdlab.ldp import (INF_COST, RateFunctional, build_cost_graph, default_eps_class,
                        grad_log_mgf, hold_cells, l_classes, local_rate, log_mgf, path_cost,
                        quasipotential)
from qsdlab.protocols import (AspirationUniform, CustomTable, PairwiseProportional, hawk_dove,
                              mean_field, zero_protocol)
from qsdlab.simplex import enumerate_grid, rank

from conftest import interior_points


@pytest.fixture(scope="module")
def rf_hd(hd):
    return RateFunctional(hd)


@pytest.fixture(scope="module")
def rf_grps(grps):
    return RateFunctional(grps)


@pytest.fixture(scope="module")
def graph_hd(rf_hd):
    return build_cost_graph(rf_hd, 60)


def both(rf_hd, rf_grps):
    return [(rf_hd, interior_points(2, 50, seed=10)), (rf_grps, interior_points(3, 50, seed=11))]


def test_h_vanishes_at_zero(rf_hd, rf_grps):
    for rf, X in both(rf_hd, rf_grps):
        assert (log_mgf(rf, X, np.zeros(rf.d)) == 0.0).all()


def test_zero_protocol():
    rf = RateFunctional(zero_protocol(3))
    rng = np.random.default_rng(0)
    x = np.array([0.2, 0.3, 0.5])
    for alpha in rng.normal(size=(10, 3)) * 5:
        assert log_mgf(rf, x, alpha) == 0.0
    assert local_rate(rf, x, np.zeros(3)) == 0.0
    assert local_rate(rf, x, [0.1, -0.1, 0.0]) == INF_COST


def test_gradient_at_zero_is_the_mean_field(rf_hd, rf_grps):
    h = 1e-5
    for rf, X in both(rf_hd, rf_grps):
        F = mean_field(rf.protocol, X)
        fd = np.empty_like(X)
        for k in range(rf.d):
            e = np.eye(rf.d)[k] * h
            fd[:, k] = (log_mgf(rf, X, e) - log_mgf(rf, X, -e)) / (2 * h)
        assert np.abs(fd - F).max() <= 1e-8
        assert np.abs(grad_log_mgf(rf, X, np.zeros(rf.d)) - F).max() <= 1e-15


def test_rate_vanishes_on_the_flow(rf_hd, rf_grps):
    for rf, X in both(rf_hd, rf_grps):
        L = local_rate(rf, X, mean_field(rf.protocol, X))
        assert (L >= 0).all() and L.max() <= 1e-8


def test_rate_nonnegative_and_zero_only_on_the_flow(rf_hd, rf_grps):
    rng = np.random.default_rng(1)
    for rf, X in both(rf_hd, rf_grps):
        F = mean_field(rf.protocol, X)
        for scale in (1e-3, 1e-2, 0.1, 0.5):
            v = rng.normal(size=X.shape)
            v -= v.mean(axis=1, keepdims=True)
            beta = F + scale * v / np.linalg.norm(v, axis=1, keepdims=True)
            L = local_rate(rf, X, beta)
            assert (L >= 0).all()
            assert (L > 1e-12).all()


def test_rate_off_tangent_space(rf_hd):
    assert local_rate(rf_hd, [0.4, 0.6], [0.1, 0.1]) == INF_COST


def test_h_convex_along_lines(rf_grps):
    rng = np.random.default_rng(2)
    X = interior_points(3, 30, seed=12)
    for _ in range(5):
        a, b = rng.normal(size=(2, 3)) * 3
        lhs = log_mgf(rf_grps, X, (a + b) / 2)
        rhs = (log_mgf(rf_grps, X, a) + log_mgf(rf_grps, X, b)) / 2
        assert (lhs <= rhs + 1e-10).all()


def test_legendre_duality(rf_hd, rf_grps):
    rng = np.random.default_rng(3)
    for rf, X in both(rf_hd, rf_grps):
        A = rng.normal(size=X.shape) * 2
        A -= A.mean(axis=1, keepdims=True)
        G = grad_log_mgf(rf, X, A)
        H = log_mgf(rf, X, A)
        L = np.array([local_rate(rf, x, g) for x, g in zip(X, G)])
        assert np.abs(L + H - (A * G).sum(axis=1)).max() <= 1e-7


def test_single_pair_cramer_oracle():
    # constant rates q both ways: H(a) = log(q e^a + q e^-a + 1 - 2q) along e_2 - e_1
    rng = np.random.default_rng(4)
    grid = np.linspace(-25.0, 25.0, 2_000_001)
    x = np.array([0.5, 0.5])
    for _ in range(20):
        q = rng.uniform(0.02, 0.45)
        v = rng.uniform(-0.9, 0.9)
        rf = RateFunctional(CustomTable(2, {(0, 1): str(q), (1, 0): str(q)}, scale=1.0))
        vals = grid * v - np.log(q * np.exp(grid) + q * np.exp(-grid) + 1 - 2 * q)
        k = int(np.argmax(vals))
        fine = np.linspace(grid[k - 1], grid[k + 1], 20001)
        brute = np.max(fine * v - np.log(q * np.exp(fine) + q * np.exp(-fine) + 1 - 2 * q))
        assert abs(local_rate(rf, x, [-v, v]) - brute) <= 1e-6


def test_rate_outside_jump_hull_is_infinite():
    rf = RateFunctional(CustomTable(2, {(0, 1): "0.2", (1, 0): "0.2"}, scale=1.0))
    assert local_rate(rf, [0.5, 0.5], [-1.5, 1.5]) == INF_COST
    assert local_rate(rf, [0.5, 0.5], [-0.99, 0.99]) < INF_COST
    one_way = RateFunctional(PairwiseProportional(hawk_dove()))
    # below x* doves imitate hawks only; moving toward more doves is impossible
    assert local_rate(one_way, [0.25, 0.75], [-0.01, 0.01]) == INF_COST


def flow_path(rf, x0, T, dt):
    tr = integrate(rf.field, x0, T, h=dt)
    return tr.times, tr.states


def test_flow_path_cost(rf_hd, rf_grps):
    for rf, x0 in [(rf_hd, [0.1, 0.9]), (rf_grps, [0.6, 0.3, 0.1])]:
        t, P = flow_path(rf, x0, 10.0, 0.05)
        assert path_cost(rf, t, P) <= 1e-6
        # same trajectory on alternating knot spacings 0.05 and 0.10
        idx = np.unique(np.r_[np.cumsum(np.r_[0, np.tile([1, 2], 100)]), len(t) - 1])
        idx = idx[idx < len(t)]
        assert path_cost(rf, t[idx], P[idx]) <= 1e-6


def test_path_cost_additivity(rf_grps):
    t = np.linspace(0, 2, 9)
    P = np.linspace([0.5, 0.3, 0.2], [0.2, 0.3, 0.5], 9)
    whole = path_cost(rf_grps, t, P)
    assert whole == pytest.approx(path_cost(rf_grps, t[:4], P[:4]) + path_cost(rf_grps, t[3:], P[3:]),
                                  rel=1e-14)


def test_reversed_flow_costs(rf_hd):
    t, P = flow_path(rf_hd, [0.2, 0.8], 3.0, 0.05)
    assert path_cost(rf_hd, t, P[::-1]) > 1e-3
    with pytest.raises(ValueError):
        path_cost(rf_hd, [0.0, 0.0], P[:2])
    assert path_cost(rf_hd, [0.0], P[:1]) == 0.0


def test_cost_graph_structure(graph_hd):
    g = graph_hd
    assert len(g.src) <= 2 * 59
    assert (g.cost >= 0).all()
    assert ((g.tau >= 0.05) & (g.tau <= 50.0)).all()
    pts = g.grid.points
    assert (pts[g.src].min(axis=1) >= 1 / 120 - 1e-12).all()
    assert (pts[g.dst].min(axis=1) >= 1 / 120 - 1e-12).all()


def test_along_flow_edges_are_cheap(rf_hd, rf_grps):
    for rf, M in [(rf_hd, 120), (rf_grps, 40)]:
        g = build_cost_graph(rf, M)
        F = rf.field(g.grid.points[g.src])
        moving = np.linalg.norm(F[g.along_flow], axis=1) > 1e-3
        if rf.d == 2:
            assert g.cost[g.along_flow][moving].max() <= 1e-4
        else:
            assert np.median(g.cost[g.along_flow][moving]) <= 1e-3


def test_impossible_edges_are_omitted():
    rf = RateFunctional(PairwiseProportional(hawk_dove()))
    g = build_cost_graph(rf, 20)
    hawk = g.grid.counts[:, 0]
    down = hawk[g.dst] < hawk[g.src]
    # below x* = 1/2 the hawk share can only grow
    assert not (down & (hawk[g.src] < 10)).any()
    assert not (~down & (hawk[g.src] > 10)).any()


def test_cost_graph_arguments(rf_hd, tmp_path, graph_hd):
    with pytest.raises(ValueError):
        build_cost_graph(rf_hd, 9)
    with pytest.raises(ValueError):
        build_cost_graph(rf_hd, 20, tau_bounds=(1.0, 0.5))
    graph_hd.to_csv(tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["src_rank", "dst_rank", "cost", "tau_opt"]
    assert len(rows) == len(graph_hd.src) + 1


def test_quasipotential_metric_properties(graph_hd):
    g = graph_hd
    nodes = np.flatnonzero(g.nodes)
    assert quasipotential(g, [nodes[3]], [nodes[3]]) == 0.0
    rng = np.random.default_rng(5)
    for _ in range(40):
        x, y, z = rng.choice(nodes, 3, replace=False)
        assert quasipotential(g, [x], [z]) <= (quasipotential(g, [x], [y])
                                               + quasipotential(g, [y], [z]) + 1e-12)
    with pytest.raises(ValueError):
        quasipotential(g, [], [nodes[0]])


def test_quasipotential_monotone_under_edge_removal(graph_hd):
    g = graph_hd
    keep = np.arange(len(g.src)) % 7 != 0
    smaller = dataclasses.replace(g, src=g.src[keep], dst=g.dst[keep], cost=g.cost[keep],
                                  tau=g.tau[keep])
    nodes = np.flatnonzero(g.nodes)
    for s in nodes[::9]:
        for t in nodes[::11]:
            assert quasipotential(smaller, [s], [t]) >= quasipotential(g, [s], [t]) - 1e-15
    cut = dataclasses.replace(g, src=g.src[:0], dst=g.dst[:0], cost=g.cost[:0], tau=g.tau[:0])
    assert quasipotential(cut, [nodes[0]], [nodes[5]]) == INF_COST


def test_barrier_stable_under_refinement(rf_hd):
    values = []
    for M in (60, 120):
        g = build_cost_graph(rf_hd, M)
        c = rank(g.grid, (M // 2, M // 2))
        edges = [rank(g.grid, (1, M - 1)), rank(g.grid, (M - 1, 1))]
        values.append([quasipotential(g, [c], [e]) for e in edges])
    values = np.array(values)
    assert (values > 0).all()
    assert (np.abs(values[1] / values[0] - 1) <= 0.10).all()


def test_hawk_dove_l_classes(rf_hd, graph_hd):
    atlas = l_classes(graph_hd, rf=rf_hd)
    assert atlas.flavor == "L"
    assert len(atlas.classes) == 1 and atlas.quasi_attractor_flags == [True]
    pts = graph_hd.grid.points[atlas.classes[0]]
    assert np.abs(pts[:, 0] - 0.5).max() <= 2 / 60


def test_two_sink_l_classes(two_sink):
    rf = RateFunctional(two_sink)
    g = build_cost_graph(rf, 60)
    atlas = l_classes(g, rf=rf)
    centers = [g.grid.points[c][:, 0].mean() for c in atlas.classes]
    assert np.allclose(centers, [0.25, 0.5, 0.75], atol=2 / 60)
    assert atlas.quasi_attractor_flags == [True, False, True]


def test_giant_class(rf_hd, graph_hd):
    nodes = np.flatnonzero(graph_hd.nodes)
    big = quasipotential(graph_hd, nodes, nodes[-1:]) + graph_hd.cost.sum()
    atlas = l_classes(graph_hd, eps_class=big, rf=rf_hd)
    assert len(atlas.classes) == 1
    assert atlas.classes[0].tolist() == nodes.tolist()
    with pytest.raises(ValueError):
        l_classes(graph_hd, eps_class=0.0)


def test_classes_independent_of_edge_order(rf_grps):
    g = build_cost_graph(rf_grps, 20)
    perm = np.random.default_rng(6).permutation(len(g.src))
    shuffled = dataclasses.replace(g, src=g.src[perm], dst=g.dst[perm], cost=g.cost[perm],
                                   tau=g.tau[perm])
    holds = hold_cells(rf_grps, g)
    eps = default_eps_class(g)
    a = l_classes(g, eps, holds=holds).to_dict()
    b = l_classes(shuffled, eps, holds=holds).to_dict()
    assert a == b


def test_barrier_matches_absorption_decay(rf_hd):
    # 1 - rho_N decays like exp(-N V) with V the cost of leaving x* for the boundary
    from qsdlab.qsd import decay_fit, sweep

    records, _ = sweep(rf_hd.protocol, [40, 60, 80, 100, 120], [0.5, 0.5], 0.1)
    gamma = decay_fit([(r.N, r.one_minus_rho) for r in records]).gamma_hat
    g = build_cost_graph(rf_hd, 240)
    V = quasipotential(g, [rank(g.grid, (120, 120))], [rank(g.grid, (1, 239))])
    assert gamma == pytest.approx(V, rel=0.10)
