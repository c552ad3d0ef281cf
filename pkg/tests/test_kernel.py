import dataclasses
import math

import numpy as np
import pytest
import scipy.sparse as sp

from qsdlab.errors import AllCensored, ProtocolViolation
from qsdlab.kernel import (absorption_time_samples, assemble, beta_estimate,
                           boundary_absorption_lower_bound, check_absorbing, descent_path,
                           interpolate, read_kernel, simulate, simulate_many, stream, write_kernel)
from qsdlab.protocols import (AspirationUniform, CustomTable, PairwiseProportional, PayoffGame,
                              hawk_dove,
                              mean_field, noise_bound, rock_paper_scissors, zero_protocol)
from qsdlab.qsd import kernel_qsd
from qsdlab.simplex import enumerate_grid, epsilon_neighborhood, rank


def geometric(q):
    """d = 2, N = 2: a single interior state that leaves with probability ``q``."""
    p = CustomTable(2, {(0, 1): f"{2 * q}*x1*x2", (1, 0): f"{2 * q}*x1*x2"}, scale=1.0)
    return assemble(p, enumerate_grid(2, 2))


def audit(kernel):
    grid = kernel.grid
    M = kernel.matrix.tocsr()
    assert np.abs(np.asarray(M.sum(axis=1)).ravel() - 1.0).max() <= 1e-14
    inner = grid.interior_index
    mass = np.asarray(kernel.interior_matrix.sum(axis=1)).ravel() + kernel.absorb_mass
    assert np.abs(mass - 1.0).max() <= 1e-14
    coo = M.tocoo()
    b = grid.boundary_mask
    assert not (b[coo.row] & ~b[coo.col]).any()
    diff = grid.counts[coo.col] - grid.counts[coo.row]
    off = coo.row != coo.col
    assert (np.abs(diff[off]).sum(axis=1) == 2).all()
    assert (diff[off].sum(axis=1) == 0).all()
    assert len(inner) == kernel.interior_matrix.shape[0]


@pytest.mark.parametrize("d, N", [(2, 3), (2, 40), (3, 4), (3, 15), (4, 6)])
def test_kernel_invariants(d, N):
    games = {2: hawk_dove(), 3: rock_paper_scissors(),
             4: PayoffGame(np.arange(16.0).reshape(4, 4) % 5)}
    game = games[d]
    audit(assemble(AspirationUniform(game), enumerate_grid(d, N)))


def test_zero_protocol_is_identity():
    k = assemble(zero_protocol(3), enumerate_grid(3, 5))
    assert (k.matrix != sp.eye(k.grid.n_points)).nnz == 0
    assert (k.absorb_mass == 0).all()


def test_small_row_structure(hd):
    k = assemble(hd, enumerate_grid(2, 3))
    assert k.grid.interior_index.tolist() == [1, 2]
    row = k.row(rank(k.grid, (1, 2)))
    assert sorted(row) == [0, 1, 2]
    assert sum(row.values()) == pytest.approx(1.0, abs=1e-15)


def test_violations():
    with pytest.raises(ProtocolViolation):
        assemble(CustomTable(2, {(0, 1): "8*x1*x2"}, scale=1.0), enumerate_grid(2, 2))
    with pytest.raises(ProtocolViolation):
        assemble(CustomTable(2, {(0, 1): "x2"}, scale=1.0), enumerate_grid(2, 4))
    with pytest.raises(ProtocolViolation):
        assemble(AspirationUniform(hawk_dove()), enumerate_grid(3, 4))


def test_drift_identity(hd, grps):
    for protocol, N in [(hd, 30), (grps, 12)]:
        k = assemble(protocol, enumerate_grid(protocol.d, N))
        pts = k.grid.points
        M = k.matrix.tocoo()
        inc = np.zeros_like(pts)
        np.add.at(inc, M.row, M.data[:, None] * (pts[M.col] - pts[M.row]))
        F = mean_field(protocol, pts)
        assert np.abs(inc - F / N).max() <= 1e-13


def test_simulate_trivial_cases(hd):
    k = assemble(zero_protocol(3), enumerate_grid(3, 6))
    s = rank(k.grid, (2, 2, 2))
    path = simulate(k, s, 50, seed=1)
    assert (path.states == s).all() and path.absorption_step is None
    k = assemble(hd, enumerate_grid(2, 10))
    vertex = rank(k.grid, (10, 0))
    path = simulate(k, vertex, 100, seed=2)
    assert (path.states == vertex).all() and path.absorption_step == 0


def test_one_step_law_matches_row(hd):
    k = assemble(hd, enumerate_grid(2, 3))
    start = rank(k.grid, (1, 2))
    n = 100_000
    ends = simulate_many(k, np.full(n, start), 1, seed=11)[:, 1]
    freq = np.bincount(ends, minlength=k.grid.n_points) / n
    for target, p in k.row(start).items():
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(freq[target] - p) <= 3 * sigma


def test_seeded_paths_reproducible(hd):
    k = assemble(hd, enumerate_grid(2, 30))
    a = simulate(k, 10, 500, seed=5, task=3).states
    b = simulate(k, 10, 500, seed=5, task=3).states
    c = simulate(k, 10, 500, seed=5, task=4).states
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    many = simulate_many(k, [10, 10], 500, seed=5, task_offset=3)
    assert np.array_equal(many[0], a) and np.array_equal(many[1], c)


def test_absorption_closure(hd):
    k = assemble(hd, enumerate_grid(2, 6))
    paths = simulate_many(k, np.full(10_000, 3), 200, seed=8)
    b = k.grid.boundary_mask[paths]
    entered = np.cumsum(b, axis=1) > 0
    assert (b | ~entered).all()
    assert b[:, -1].mean() > 0.05


def test_martingale_noise_and_gamma(grps):
    N = 10
    k = assemble(grps, enumerate_grid(3, N))
    s = rank(k.grid, (3, 3, 4))
    pts = k.grid.points
    n = 100_000
    ends = simulate_many(k, np.full(n, s), 1, seed=21)[:, 1]
    F = mean_field(grps, pts[s])
    U = N * (pts[ends] - pts[s]) - F
    mean, se = U.mean(axis=0), U.std(axis=0, ddof=1) / math.sqrt(n)
    assert (np.abs(mean) <= 4 * se).all()
    gamma = noise_bound(grps, pts)
    paths = simulate_many(k, np.full(200, s), 100, seed=22)
    steps = N * (pts[paths[:, 1:]] - pts[paths[:, :-1]]) - mean_field(grps, pts[paths[:, :-1]])
    assert (np.einsum("...i,...i", steps, steps) <= gamma + 1e-12).all()


def test_interpolation():
    pts = np.array([[0.2, 0.8], [0.3, 0.7], [0.5, 0.5]])
    X = interpolate(pts, 10)
    assert X.horizon == pytest.approx(0.2)
    assert np.allclose(X(0.05), [0.25, 0.75])
    assert np.allclose(X(X.knots), pts)
    const = interpolate(np.tile([0.4, 0.6], (5, 1)), 7)
    assert np.allclose(const(np.linspace(0, const.horizon, 33)), [0.4, 0.6])


def test_interpolation_reproduces_simulated_path(hd):
    k = assemble(hd, enumerate_grid(2, 25))
    path = simulate(k, 12, 200, seed=9)
    X = interpolate(k.grid.points[path.states], 25)
    assert np.array_equal(X(X.knots), k.grid.points[path.states])


def test_absorption_certain():
    k = geometric(1.0)
    s = absorption_time_samples(k, [1.0], 500, seed=1)
    assert (s.times == 1).all() and not s.censored.any()


def test_absorption_geometric_mean():
    q = 0.3
    k = geometric(q)
    assert k.absorb_mass[0] == pytest.approx(q)
    s = absorption_time_samples(k, [1.0], 20_000, seed=2)
    assert abs(s.mean() - 1 / q) <= 3 * s.stderr()


def test_absorption_from_qsd(hd):
    k = assemble(hd, enumerate_grid(2, 12))
    sol = kernel_qsd(k)
    s = absorption_time_samples(k, sol.mu, 20_000, seed=3)
    assert abs(s.mean() - sol.expected_T0) <= 3 * s.stderr()


def test_all_censored(hd):
    k = assemble(hd, enumerate_grid(2, 60))
    with pytest.raises(AllCensored):
        absorption_time_samples(k, np.ones(59) / 59, 20, seed=1, step_cap=5)
    s = absorption_time_samples(k, np.ones(59) / 59, 200, seed=1, step_cap=50)
    assert s.censored.any() and (s.times[s.censored] == 50).all()


def test_check_absorbing(hd):
    assert check_absorbing(assemble(hd, enumerate_grid(2, 20))).size == 0
    stuck = assemble(zero_protocol(2), enumerate_grid(2, 5))
    assert stuck.grid.interior_index.tolist() == check_absorbing(stuck).tolist()


def test_descent_bound_trivial_cases():
    k = assemble(zero_protocol(2), enumerate_grid(2, 40))
    always = dataclasses.replace(k, protocol=CustomTable(2, {(0, 1): "1"}, scale=1.0))
    b = boundary_absorption_lower_bound(always, 0, 0.25)
    assert (b.steps, b.product, b.log_rate) == (10, 1.0, 0.0)
    linear = dataclasses.replace(k, protocol=CustomTable(2, {(0, 1): "x1"}, scale=1.0))
    b = boundary_absorption_lower_bound(linear, 0, 0.25)
    assert b.product == pytest.approx(math.factorial(10) / 40 ** 10, rel=1e-12)
    with pytest.raises(ValueError):
        boundary_absorption_lower_bound(k, 0, 1.0)


def test_descent_bound_hawk_dove():
    N, b = 100, 0.1
    k = assemble(AspirationUniform(hawk_dove()), enumerate_grid(2, N))
    got = boundary_absorption_lower_bound(k, 0, b)
    # q_H(x) = s x_H x_D (b(x) - U_H) / (b(x) - a(x)) with U_H = 2 - 3h, U_D = 1 - h
    logp = 0.0
    for j in range(1, 11):
        h = j / N
        uh, ud = 2 - 3 * h, 1 - h
        lo, hi = min(uh, ud) - 1, max(uh, ud) + 1
        logp += math.log(0.5 * h * (1 - h) * (hi - uh) / (hi - lo))
    assert got.steps == 10
    assert got.log_rate == pytest.approx(logp / N, rel=1e-12)
    assert descent_path(k.grid, 0, 3)[:, 0].tolist() == [0.01, 0.02, 0.03]


def test_beta_trivial_cases(hd):
    k = assemble(zero_protocol(2), enumerate_grid(2, 20))
    assert beta_estimate(k, [5, 6, 7], 0.01, 50, seed=1).beta == 0.0
    k = assemble(hd, enumerate_grid(2, 20))
    assert beta_estimate(k, [5, 10], 1.5, 50, seed=1).beta == 0.0


def test_beta_decreases_with_N(hd):
    betas = []
    for N in (50, 100):
        k = assemble(hd, enumerate_grid(2, N))
        K = np.intersect1d(epsilon_neighborhood(k.grid, [0.5, 0.5], 0.1), k.grid.interior_index)
        betas.append(beta_estimate(k, K, 0.1, 2000, seed=4).beta)
    assert betas[1] < betas[0]


def test_kernel_dump_roundtrip(tmp_path, grps):
    k = assemble(grps, enumerate_grid(3, 5))
    write_kernel(k, tmp_path / "k.mtx")
    d, N, digest, M = read_kernel(tmp_path / "k.mtx")
    assert (int(d), int(N), digest) == (3, 5, grps.digest())
    assert abs(M - k.matrix).max() == 0.0


def test_streams_are_independent():
    a = stream(1, 0).random(4)
    assert not np.array_equal(a, stream(1, 1).random(4))
    assert np.array_equal(a, stream(1, 0).random(4))


def test_pairwise_kernel_assembles():
    k = assemble(PairwiseProportional(hawk_dove()), enumerate_grid(2, 20))
    audit(k)
