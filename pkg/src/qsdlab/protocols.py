"""Payoff games and imitative revision protocols.

A protocol maps a population state ``x`` to the matrix of switching
probabilities ``P[i, j] = p_ij(x)`` (probability that one revising agent moves
from strategy ``i`` to ``j`` in one step).  Every evaluator is vectorised:
``x`` may be a single point of shape ``(d,)`` or a batch ``(n, d)``, and the
result has shape ``(..., d, d)``.  Strategy indices are 0-based.

All built-in protocols carry a global scale ``s`` that multiplies every rate;
with ``s <= 1/2`` each state keeps a self-loop of probability at least 1/2.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DegenerateAspiration, ProtocolViolation

KINDS = (
    "PairwiseProportional",
    "AspirationUniform",
    "AspirationScaled",
    "Dissatisfaction",
    "CustomTable",
)


@dataclass(frozen=True, eq=False)
class PayoffGame:
    """Linear population game with payoffs ``U(x) = A x``."""

    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("payoff matrix must be square")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def payoffs(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.A.T

    def mean_payoff(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,...i->...", x, self.payoffs(x))


def hawk_dove(v: float = 2.0, c: float = 4.0) -> PayoffGame:
    """Hawk (strategy 0) vs Dove (strategy 1); interior equilibrium at hawk share v/c."""
    return PayoffGame([[(v - c) / 2.0, v], [0.0, v / 2.0]])


def rock_paper_scissors(win: float = 2.0, loss: float = 1.0) -> PayoffGame:
    """Generalised RPS; the barycenter attracts under replicator dynamics when win > loss."""
    return PayoffGame([[0.0, -loss, win], [win, 0.0, -loss], [-loss, win, 0.0]])


def coordination(a: float = 1.0, b: float = 1.0) -> PayoffGame:
    return PayoffGame([[a, 0.0], [0.0, b]])


def _offdiag_mask(d: int) -> np.ndarray:
    return ~np.eye(d, dtype=bool)


class RevisionProtocol:
    """Base class; subclasses provide ``scale`` and implement :meth:`_raw_rates`."""

    scale: float
    kind = ""
    interior_noisy = True

    @property
    def d(self) -> int:
        raise NotImplementedError

    def _raw_rates(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def rates(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        P = self.scale * self._raw_rates(x)
        P = np.where(_offdiag_mask(self.d), P, 0.0)
        return P

    def params(self) -> dict:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, **self.params()}

    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _outer(x):
    return x[..., :, None] * x[..., None, :]


@dataclass(frozen=True, eq=False)
class PairwiseProportional(RevisionProtocol):
    """Imitate a better-performing opponent with probability ``(U_j - U_i)^+``.

    Rates vanish in the interior wherever payoff differences are nonpositive,
    so the chain generally fails interior irreducibility (flag
    ``interior_noisy`` is off).
    """

    game: PayoffGame
    scale: float = 0.5
    kind = "PairwiseProportional"

    interior_noisy = False

    @property
    def d(self):
        return self.game.d

    def _raw_rates(self, x):
        U = self.game.payoffs(x)
        gain = np.maximum(U[..., None, :] - U[..., :, None], 0.0)
        return _outer(x) * gain

    def params(self):
        return {"payoff": self.game.A}


@dataclass(frozen=True, eq=False)
class AspirationUniform(RevisionProtocol):
    """Aspiration levels uniform on ``[a(x), b(x)]``, common to all types.

    ``a(x) = min_i U_i(x) - margin_low`` and ``b(x) = max_i U_i(x) + margin_high``.
    """

    game: PayoffGame
    margin_low: float = 1.0
    margin_high: float = 1.0
    scale: float = 0.5
    kind = "AspirationUniform"

    @property
    def d(self):
        return self.game.d

    def bounds(self, x):
        U = self.game.payoffs(x)
        return U.min(axis=-1) - self.margin_low, U.max(axis=-1) + self.margin_high

    def _raw_rates(self, x):
        U = self.game.payoffs(x)
        a, b = U.min(axis=-1) - self.margin_low, U.max(axis=-1) + self.margin_high
        width = b - a
        if np.any(width <= 0):
            raise DegenerateAspiration("aspiration interval b(x) - a(x) must be positive")
        dissatisfied = (b[..., None] - U) / width[..., None]
        return _outer(x) * dissatisfied[..., :, None]

    def params(self):
        return {"payoff": self.game.A, "margin_low": self.margin_low,
                "margin_high": self.margin_high}


@dataclass(frozen=True, eq=False)
class AspirationScaled(RevisionProtocol):
    """Aspiration bounds proportional to own payoff: ``a_i = alpha_i U_i``, ``b_i = beta_i U_i``.

    The switching probability of type ``i`` reduces to the constant
    ``(beta_i - 1) / (beta_i - alpha_i)``; payoffs must stay positive.
    """

    game: PayoffGame
    alpha: tuple = ()
    beta: tuple = ()
    scale: float = 0.5
    kind = "AspirationScaled"

    @property
    def d(self):
        return self.game.d

    def __post_init__(self):
        a, b = np.asarray(self.alpha, float), np.asarray(self.beta, float)
        if a.shape != (self.d,) or b.shape != (self.d,):
            raise ValueError("alpha and beta need one entry per strategy")
        if not (np.all(a < 1.0) and np.all(b > 1.0)):
            raise ValueError("need alpha_i < 1 < beta_i")

    def switch_weights(self):
        a, b = np.asarray(self.alpha, float), np.asarray(self.beta, float)
        return (b - 1.0) / (b - a)

    def _raw_rates(self, x):
        U = self.game.payoffs(x)
        if np.any(U <= 0):
            raise DegenerateAspiration("scaled aspirations need positive payoffs")
        v = self.switch_weights()
        return _outer(x) * v[:, None]

    def params(self):
        return {"payoff": self.game.A, "alpha": list(self.alpha), "beta": list(self.beta)}


@dataclass(frozen=True, eq=False)
class Dissatisfaction(RevisionProtocol):
    """Switch with probability ``(B - U_i) / (B - A)`` and imitate a random opponent."""

    game: PayoffGame
    low: float = 0.0
    high: float = 1.0
    scale: float = 0.5
    kind = "Dissatisfaction"

    @property
    def d(self):
        return self.game.d

    def _raw_rates(self, x):
        if self.high <= self.low:
            raise DegenerateAspiration("need B > A")
        U = self.game.payoffs(x)
        if np.any(U < self.low) or np.any(U > self.high):
            raise DegenerateAspiration("payoffs must lie within [A, B]")
        w = (self.high - U) / (self.high - self.low)
        return _outer(x) * w[..., :, None]

    def params(self):
        return {"payoff": self.game.A, "A": self.low, "B": self.high}


class CustomTable(RevisionProtocol):
    """Rates given as polynomial expressions in ``x1 .. xd``.

    ``table`` maps 0-based pairs ``(i, j)`` to expression strings; missing
    pairs are zero.  An empty table is the zero protocol.
    """

    kind = "CustomTable"

    def __init__(self, d: int, table: Mapping[tuple, str], scale: float = 0.5,
                 interior_noisy: bool = False):
        import sympy

        object.__setattr__(self, "scale", float(scale))
        self._d = int(d)
        self._exprs = {}
        self._funcs = {}
        symbols = sympy.symbols(f"x1:{self._d + 1}")
        names = {str(s): s for s in symbols}
        for (i, j), text in sorted(table.items()):
            if not (0 <= i < d and 0 <= j < d) or i == j:
                raise ProtocolViolation(f"invalid pair ({i}, {j}) for d={d}")
            expr = sympy.sympify(str(text), locals=names)
            if not expr.free_symbols <= set(symbols):
                raise ProtocolViolation(f"rate ({i}, {j}) uses unknown symbols {expr.free_symbols}")
            if not expr.is_polynomial(*symbols):
                raise ProtocolViolation(f"rate ({i}, {j}) is not a polynomial in x")
            self._exprs[(int(i), int(j))] = str(text)
            self._funcs[(int(i), int(j))] = sympy.lambdify(symbols, expr, "numpy")
        self.interior_noisy = bool(interior_noisy)

    def __setattr__(self, name, value):
        if name in ("scale", "kind"):
            raise AttributeError("protocols are immutable")
        object.__setattr__(self, name, value)

    @property
    def d(self):
        return self._d

    @property
    def table(self):
        return dict(self._exprs)

    def _raw_rates(self, x):
        out = np.zeros(x.shape[:-1] + (self._d, self._d))
        cols = [x[..., k] for k in range(self._d)]
        for (i, j), f in self._funcs.items():
            out[..., i, j] = np.broadcast_to(np.asarray(f(*cols), dtype=float), x.shape[:-1])
        return out

    def params(self):
        return {"rates": {f"{i + 1},{j + 1}": e for (i, j), e in sorted(self._exprs.items())},
                "interior_noisy": self.interior_noisy}


def zero_protocol(d: int) -> CustomTable:
    return CustomTable(d, {}, scale=1.0)


def jump_rates(protocol: RevisionProtocol, x) -> np.ndarray:
    """Matrix of switching probabilities ``p_ij(x)`` with zero diagonal."""
    return protocol.rates(x)


def mean_field(protocol: RevisionProtocol, x) -> np.ndarray:
    """Drift ``F(x) = p(x) - q(x)`` (inflow minus outflow per strategy)."""
    P = protocol.rates(x)
    return P.sum(axis=-2) - P.sum(axis=-1)


def outflow(protocol: RevisionProtocol, x) -> np.ndarray:
    """``q_i(x)``: probability that the next step removes one agent from ``i``."""
    return protocol.rates(x).sum(axis=-1)


def replicator_field(game: PayoffGame, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    U = game.payoffs(x)
    return x * (U - np.einsum("...i,...i->...", x, U)[..., None])


def check_conditions(protocol: RevisionProtocol, points: np.ndarray, tol: float = 1e-12,
                     require_noisy: bool | None = None) -> None:
    """Raise :class:`ProtocolViolation` if rates break the imitation conditions at ``points``.

    Nonnegativity, zero diagonal and total mass at most 1 are always checked;
    ``p_ij > 0 <=> x_i x_j > 0`` is checked when ``require_noisy`` (default:
    the protocol's ``interior_noisy`` flag).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    P = protocol.rates(pts)
    neg = (P < -tol).any(axis=(1, 2))
    if neg.any():
        raise ProtocolViolation("negative rate", state=pts[np.argmax(neg)])
    mass = P.sum(axis=(1, 2))
    if (mass > 1.0 + tol).any():
        k = int(np.argmax(mass))
        raise ProtocolViolation(f"total rate {mass[k]:.6g} exceeds 1", state=pts[k])
    if require_noisy is None:
        require_noisy = protocol.interior_noisy
    if require_noisy:
        used = _outer(pts) > 0
        off = _offdiag_mask(protocol.d)
        bad = ((P > 0) != used) & off
        if bad.any():
            k = int(np.argmax(bad.any(axis=(1, 2))))
            raise ProtocolViolation("rates must vanish exactly when x_i x_j = 0", state=pts[k])


def noise_bound(protocol: RevisionProtocol, points: np.ndarray) -> float:
    """Smallest ``Gamma`` with ``||y - F(x)||^2 <= Gamma`` over the supplied states.

    ``y`` ranges over the jumps ``e_j - e_i`` of positive probability and the
    null jump when the self-loop has positive probability.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = protocol.d
    P = protocol.rates(pts)
    F = P.sum(axis=-2) - P.sum(axis=-1)
    stay = 1.0 - P.sum(axis=(1, 2))
    eye = np.eye(d)
    gamma = float(np.max(np.einsum("ni,ni->n", F, F), where=stay > 0, initial=0.0))
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            y = eye[j] - eye[i]
            r = y[None, :] - F
            sq = np.einsum("ni,ni->n", r, r)
            gamma = max(gamma, float(np.max(sq, where=P[:, i, j] > 0, initial=0.0)))
    return gamma
