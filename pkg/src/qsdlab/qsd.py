"""Quasi-stationary distribution of the interior-restricted kernel.

The QSD is the positive left Perron vector of the substochastic matrix
``Q*``; it is computed by power iteration on the left action with L1
normalisation.  Because ``1 - rho`` becomes smaller than the spacing of
doubles near 1 for large populations, it is evaluated directly as
``mu . absorb_mass`` whenever the one-step absorption mass is available.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from . import _accel
from .errors import (NoConvergence, NonPositiveGap, NotIrreducible, NotSubstochastic,
                     TooLarge, TotalAbsorption, UnsupportedProtocol)
from .kernel import TransitionKernel, assemble
from .protocols import RevisionProtocol, mean_field
from .simplex import SimplexGrid, enumerate_grid, epsilon_neighborhood, nearest_counts

DENSE_LIMIT = 2000
SLOW_CONTRACTION = 0.9999


@dataclass(frozen=True)
class QsdSolution:
    mu: np.ndarray
    rho: float
    one_minus_rho: float
    residual: float
    iterations: int
    gap_estimate: float
    ranks: np.ndarray = field(default=None, repr=False)

    @property
    def theta(self) -> float:
        return -math.log1p(-self.one_minus_rho)

    @property
    def expected_T0(self) -> float:
        return 1.0 / self.one_minus_rho


def _check_substochastic(Q, strict=True):
    if (Q.data < 0).any() if sp.issparse(Q) else (Q < 0).any():
        raise NotSubstochastic("negative entries")
    rows = np.asarray(Q.sum(axis=1)).ravel()
    if (rows > 1.0 + 1e-12).any():
        raise NotSubstochastic(f"row sum {rows.max():.17g} exceeds 1")
    if strict and not (rows < 1.0).any():
        raise NotSubstochastic("no row loses mass; the restriction is stochastic")
    return rows


def is_irreducible(Q) -> bool:
    n, _ = connected_components(sp.csr_matrix(Q), directed=True, connection="strong")
    return n == 1


def _contraction(diffs: np.ndarray) -> float:
    good = diffs[diffs > 0]
    if len(good) < 3:
        return float("nan")
    w = min(200, len(good) // 2)
    return float((good[-1] / good[-1 - w]) ** (1.0 / w))


def _polish(Q, mu, steps: int = 3) -> np.ndarray:
    """Inverse iteration with shift 1 started from the power-iteration vector.

    Entries of ``mu`` near the boundary can be many orders of magnitude below
    the L1 tolerance, and ``1 - rho`` is read off exactly those entries.  The
    Perron value of ``(I - Q)^{-1}`` dominates the next one by a factor of
    order ``(1 - |lambda_2|) / (1 - rho)``, so a few solves fix every entry to
    near relative precision.
    """
    n = Q.shape[0]
    A = (sp.identity(n, format="csr") - Q).T.tocsc()
    try:
        lu = splu(A)
    except RuntimeError:  # singular: Q stochastic on a closed class
        return mu
    v = mu
    for _ in range(steps):
        w = lu.solve(v)
        if not np.all(np.isfinite(w)) or w.sum() <= 0:
            return mu
        v = np.abs(w) / w.sum()
    return v


def solve_qsd(Q, tol: float = 1e-12, max_iter: int = 10**6, absorb_mass=None,
              ranks=None, backend: str | None = None, polish: bool = True) -> QsdSolution:
    """QSD and Perron eigenvalue of the substochastic matrix ``Q``.

    Parameters
    ----------
    Q : sparse or dense (n, n) array
        Interior restriction of the transition matrix.
    tol : float
        L1 tolerance on successive normalised iterates; the residual
        ``|mu Q - rho mu|_1`` must also fall below ``10 * tol``.
    absorb_mass : array, optional
        One-step absorption probabilities; used for an accurate ``1 - rho``.
    polish : bool
        Refine the converged vector by shift-1 inverse iteration (see
        :func:`_polish`); the iteration count and contraction estimate still
        describe the power iteration.

    Raises
    ------
    NotIrreducible, NotSubstochastic, NoConvergence
    """
    Q = sp.csr_matrix(Q, dtype=float)
    n = Q.shape[0]
    rows = _check_substochastic(Q, strict=absorb_mass is None)
    if not is_irreducible(Q):
        raise NotIrreducible("the interior restriction has several communicating classes")
    QT = Q.T.tocsr()
    QT.sort_indices()
    mu0 = np.full(n, 1.0 / n)
    mu, _, res, iters, diffs, ok = _accel.power_iteration(QT, mu0, tol, max_iter, backend)
    gap = _contraction(diffs)
    if gap >= SLOW_CONTRACTION:
        warnings.warn(f"power iteration contracts slowly (factor {gap:.6f})", RuntimeWarning)
    if not ok:
        raise NoConvergence(f"no convergence after {max_iter} iterations", last=mu, residual=res)
    if polish:
        mu = _polish(Q, mu)
    nu = QT @ mu
    rho = float(nu.sum())
    res = float(np.abs(nu - rho * mu).sum())
    if absorb_mass is not None:
        one_minus = float(np.dot(mu, absorb_mass))
    else:
        one_minus = float(np.dot(mu, 1.0 - rows))
    return QsdSolution(mu, rho, one_minus, res, int(iters), gap,
                       np.arange(n) if ranks is None else np.asarray(ranks))


def kernel_qsd(kernel: TransitionKernel, tol: float = 1e-12, max_iter: int = 10**6,
               force: bool = False, backend: str | None = None,
               polish: bool = True) -> QsdSolution:
    """:func:`solve_qsd` on a kernel's interior restriction.

    Protocols whose rates can vanish in the interior are refused unless
    ``force`` is set.
    """
    if not kernel.protocol.interior_noisy and not force:
        raise UnsupportedProtocol(
            f"{kernel.protocol.kind} rates can vanish in the interior; pass force=True")
    return solve_qsd(kernel.interior_matrix, tol, max_iter, kernel.absorb_mass,
                     kernel.grid.interior_index, backend, polish)


@dataclass(frozen=True)
class DenseSpectrum:
    moduli: np.ndarray      # |eigenvalues| in decreasing order
    rho: float
    mu: np.ndarray
    ratio: float            # |lambda_2| / rho


def dense_oracle_qsd(Q) -> DenseSpectrum:
    """Full eigendecomposition of a small substochastic matrix."""
    Q = np.asarray(Q.toarray() if sp.issparse(Q) else Q, dtype=float)
    n = Q.shape[0]
    if n > DENSE_LIMIT:
        raise TooLarge(f"{n} states exceed the dense limit {DENSE_LIMIT}")
    _check_substochastic(Q)
    w, v = np.linalg.eig(Q.T)
    k = int(np.argmax(w.real))
    mu = np.abs(v[:, k].real)
    mu /= mu.sum()
    mod = np.sort(np.abs(w))[::-1]
    rho = float(w[k].real)
    ratio = float(mod[1] / rho) if n > 1 else 0.0
    return DenseSpectrum(mod, rho, mu, ratio)


def conditional_pushforward(Q, nu) -> np.ndarray:
    """Law after one step conditioned on survival: ``nu Q / (nu Q 1)``."""
    if isinstance(Q, TransitionKernel):
        Q = Q.interior_matrix
    out = np.asarray(sp.csr_matrix(Q).T @ np.asarray(nu, dtype=float)).ravel()
    total = out.sum()
    if total <= 0.0:
        raise TotalAbsorption("the distribution is absorbed in one step")
    return out / total


def qsd_mass_in(solution: QsdSolution, region) -> float:
    """Mass of the QSD on a set of grid ranks (all of which must be interior)."""
    region = np.asarray(region, dtype=np.int64)
    if region.size == 0:
        return 0.0
    present = np.isin(region, solution.ranks)
    if not present.all():
        raise ValueError("region contains states outside the QSD support")
    return float(solution.mu[np.isin(solution.ranks, region)].sum())


@dataclass(frozen=True)
class DecayFit:
    gamma_hat: float
    intercept: float
    r_squared: float


def decay_fit(pairs) -> DecayFit:
    """Least-squares line through ``(N, log(1 - rho_N) + log N)``; slope ``-gamma_hat``."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("decay_fit needs at least 3 (N, 1 - rho_N) pairs")
    N = np.array([p[0] for p in pairs], dtype=float)
    gap = np.array([p[1] for p in pairs], dtype=float)
    if (gap <= 0).any():
        raise NonPositiveGap("every 1 - rho_N must be positive")
    y = np.log(gap) + np.log(N)
    slope, intercept = np.polyfit(N, y, 1)
    resid = y - (slope * N + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(-slope), float(intercept), r2)


def invariance_defect(solution: QsdSolution, grid: SimplexGrid, F, t: float) -> float:
    """Total variation between ``mu`` and its transport by the time-``t`` flow, on grid cells."""
    from .flow import flow_map_many

    pts = grid.points[solution.ranks]
    moved = flow_map_many(F, pts, t)
    dest = grid.rank_many(nearest_counts(moved, grid.N))
    pushed = np.bincount(dest, weights=solution.mu, minlength=grid.n_points)
    base = np.zeros(grid.n_points)
    base[solution.ranks] = solution.mu
    return 0.5 * float(np.abs(pushed - base).sum())


@dataclass(frozen=True)
class SweepRecord:
    N: int
    rho: float
    one_minus_rho: float
    theta: float
    expected_T0: float
    qsd_mass_eps: float
    residual: float
    iterations: int
    gap_estimate: float
    invariance_defect: float
    seconds: float


def sweep(protocol: RevisionProtocol, N_list, center, eps: float, tol: float = 1e-12,
          max_iter: int = 10**6, invariance_t: float = 1.0, force: bool = False,
          backend: str | None = None, polish: bool = True) -> tuple[list[SweepRecord], list[QsdSolution]]:
    """Solve the QSD for each population size and collect the trend diagnostics."""
    F = lambda x: mean_field(protocol, x)  # noqa: E731
    records, sols = [], []
    for N in N_list:
        t0 = time.perf_counter()
        grid = enumerate_grid(protocol.d, int(N))
        kern = assemble(protocol, grid)
        sol = kernel_qsd(kern, tol, max_iter, force, backend, polish)
        region = np.intersect1d(epsilon_neighborhood(grid, center, eps), grid.interior_index)
        mass = qsd_mass_in(sol, region)
        defect = invariance_defect(sol, grid, F, invariance_t)
        seconds = time.perf_counter() - t0
        records.append(SweepRecord(int(N), sol.rho, sol.one_minus_rho, sol.theta,
                                   sol.expected_T0, mass, sol.residual, sol.iterations,
                                   sol.gap_estimate, defect, seconds))
        sols.append(sol)
    return records, sols
