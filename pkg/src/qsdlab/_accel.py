"""Hot loops: chain simulation, hitting times and power iteration.

Each kernel has a numba implementation and a pure-numpy fallback with the
same random-number consumption.  The backend is chosen once at import from
the ``QSDLAB_BACKEND`` environment variable (``numba`` or ``numpy``); numba
is used when available unless ``numpy`` is requested.

Transition rows are passed as padded dense tables: ``targets[s, k]`` and the
running sums ``cum[s, k]`` over the row in rank order, padded with
``cum = 2`` so padding is never selected by a uniform in ``[0, 1)``.
"""
from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("QSDLAB_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"QSDLAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested == "numpy":
        raise ImportError
    import numba
    from numba import njit
except ImportError:
    numba = None
    BACKEND = "numpy"
else:
    BACKEND = "numba"

# status codes for the streaming hitting-time kernel
NEED_MORE = 0
EXITED = 1
CENSORED = 2


# ----------------------------------------------------------------------------
# numpy implementations
# ----------------------------------------------------------------------------

def paths_numpy(targets, cum, starts, uniforms):
    """Simulate one path per row of ``uniforms``; returns ``(m, steps + 1)`` states."""
    m, steps = uniforms.shape
    out = np.empty((m, steps + 1), dtype=np.int64)
    s = np.asarray(starts, dtype=np.int64).copy()
    out[:, 0] = s
    for t in range(steps):
        k = np.argmax(uniforms[:, t, None] < cum[s], axis=1)
        s = targets[s, k]
        out[:, t + 1] = s
    return out


def _hold(u, stay):
    # extra self-loop steps before the next move, geometric on {0, 1, ...}
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.floor(np.log1p(-u) / np.log(stay))
    return np.where(stay > 0.0, g, 0.0)


def hitting_numpy(move_targets, move_cum, stay, inside, starts, streams, cap, block=4096):
    """First step at which each chain leaves ``inside``; vectorised across chains.

    ``move_cum`` holds running sums of the off-diagonal probabilities, so a
    move is chosen with ``u * (1 - stay) < move_cum``.  Returns ``times`` and a
    boolean ``censored`` array.
    """
    m = len(starts)
    state = np.asarray(starts, dtype=np.int64).copy()
    t = np.zeros(m, dtype=np.float64)
    times = np.zeros(m, dtype=np.int64)
    censored = np.zeros(m, dtype=bool)
    active = np.flatnonzero(inside[state])
    # chains starting outside count as exiting at step 0
    buf = np.empty((m, block))
    pos = block
    while active.size:
        if pos + 2 > block:
            for a in active:
                buf[a] = streams[a].random(block)
            pos = 0
        u1, u2 = buf[active, pos], buf[active, pos + 1]
        pos += 2
        s = state[active]
        st = stay[s]
        frozen = st >= 1.0
        g = _hold(u1, st)
        t_new = t[active] + g + 1.0
        k = np.argmax((u2 * (1.0 - st))[:, None] < move_cum[s], axis=1)
        nxt = move_targets[s, k]
        over = frozen | (t_new > cap)
        left = ~over & ~inside[nxt]
        state[active] = np.where(over, s, nxt)
        t[active] = np.where(over, cap, t_new)
        done_c, done_e = active[over], active[left]
        censored[done_c] = True
        times[done_c] = cap
        times[done_e] = t_new[left].astype(np.int64)
        active = active[~(over | left)]
    return times, censored


def power_numpy(QT, mu, tol, max_iter):
    """Left power iteration ``mu <- mu Q / |mu Q|_1`` using ``QT = Q.T`` (CSR)."""
    diffs = np.empty(max_iter)
    rho = 0.0
    res = np.inf
    for it in range(max_iter):
        nu = QT @ mu
        rho = nu.sum()
        if rho <= 0.0:
            return mu, rho, res, it, diffs[:it], False
        res = np.abs(nu - rho * mu).sum()
        nu /= rho
        diffs[it] = np.abs(nu - mu).sum()
        mu = nu
        if diffs[it] < tol and res < 10.0 * tol:
            return mu, rho, res, it + 1, diffs[: it + 1], True
    return mu, rho, res, max_iter, diffs, False


# ----------------------------------------------------------------------------
# numba implementations
# ----------------------------------------------------------------------------

if numba is not None:

    @njit(cache=True, nogil=True)
    def _paths_numba(targets, cum, starts, uniforms):
        m, steps = uniforms.shape
        width = cum.shape[1]
        out = np.empty((m, steps + 1), dtype=np.int64)
        for p in range(m):
            s = starts[p]
            out[p, 0] = s
            for t in range(steps):
                u = uniforms[p, t]
                k = 0
                while k < width - 1 and not (u < cum[s, k]):
                    k += 1
                s = targets[s, k]
                out[p, t + 1] = s
        return out

    @njit(cache=True, nogil=True)
    def _advance_numba(state, t, cap, move_targets, move_cum, stay, inside, u):
        """Consume uniforms in pairs until exit, censoring or exhaustion of ``u``."""
        width = move_cum.shape[1]
        n = u.shape[0] - 1
        i = 0
        while i < n:
            st = stay[state]
            if st >= 1.0:
                return state, cap, i, CENSORED
            u1 = u[i]
            u2 = u[i + 1]
            i += 2
            g = 0.0
            if st > 0.0:
                g = np.floor(np.log1p(-u1) / np.log(st))
            t_new = t + g + 1.0
            if t_new > cap:
                return state, cap, i, CENSORED
            x = u2 * (1.0 - st)
            k = 0
            while k < width - 1 and not (x < move_cum[state, k]):
                k += 1
            state = move_targets[state, k]
            t = t_new
            if not inside[state]:
                return state, t, i, EXITED
        return state, t, i, NEED_MORE

    @njit(cache=True, nogil=True)
    def _power_numba(indptr, indices, data, mu, tol, max_iter):
        n = mu.shape[0]
        diffs = np.empty(max_iter)
        nu = np.empty(n)
        rho = 0.0
        res = np.inf
        for it in range(max_iter):
            rho = 0.0
            for r in range(n):
                acc = 0.0
                for k in range(indptr[r], indptr[r + 1]):
                    acc += data[k] * mu[indices[k]]
                nu[r] = acc
                rho += acc
            if rho <= 0.0:
                return mu, rho, res, it, diffs[:it], False
            res = 0.0
            for r in range(n):
                res += abs(nu[r] - rho * mu[r])
            dif = 0.0
            for r in range(n):
                v = nu[r] / rho
                dif += abs(v - mu[r])
                mu[r] = v
            diffs[it] = dif
            if dif < tol and res < 10.0 * tol:
                return mu, rho, res, it + 1, diffs[: it + 1], True
        return mu, rho, res, max_iter, diffs, False


def hitting_numba(move_targets, move_cum, stay, inside, starts, streams, cap, block=1 << 15):
    m = len(starts)
    times = np.zeros(m, dtype=np.int64)
    censored = np.zeros(m, dtype=bool)
    for a in range(m):
        times[a], censored[a] = hitting_one(move_targets, move_cum, stay, inside,
                                            int(starts[a]), streams[a], cap, block)
    return times, censored


def hitting_one(move_targets, move_cum, stay, inside, start, stream, cap, block=1 << 15):
    """Single-chain hitting time with streamed uniforms (numba backend only)."""
    if not inside[start]:
        return 0, False
    state, t = start, 0.0
    cap = float(cap)
    while True:
        u = stream.random(block)
        state, t, _, status = _advance_numba(state, t, cap, move_targets, move_cum,
                                             stay, inside, u)
        if status == EXITED:
            return int(t), False
        if status == CENSORED:
            return int(cap), True


def simulate_paths(targets, cum, starts, uniforms, backend=None):
    backend = backend or BACKEND
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if backend == "numba":
        return _paths_numba(targets, cum, starts, uniforms)
    return paths_numpy(targets, cum, starts, uniforms)


def hitting_times(move_targets, move_cum, stay, inside, starts, streams, cap, backend=None):
    backend = backend or BACKEND
    if backend == "numba":
        return hitting_numba(move_targets, move_cum, stay, inside, starts, streams, cap)
    return hitting_numpy(move_targets, move_cum, stay, inside, starts, streams, cap)


def power_iteration(QT, mu0, tol, max_iter, backend=None):
    """Returns ``(mu, rho, residual, iterations, diffs, converged)``."""
    backend = backend or BACKEND
    mu = np.array(mu0, dtype=np.float64)
    if backend == "numba":
        return _power_numba(QT.indptr.astype(np.int64), QT.indices.astype(np.int64),
                            QT.data.astype(np.float64), mu, float(tol), int(max_iter))
    return power_numpy(QT, mu, tol, max_iter)
