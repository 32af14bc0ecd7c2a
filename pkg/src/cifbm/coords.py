"""Coordinate systems for distributions over binary vectors.

A distribution over ``n`` binary variables is stored as ``2**n`` cell
probabilities indexed by bitmask: bit ``i - 1`` is set when variable ``i``
equals one.  Every vector indexed by non-empty subsets (eta, theta) is kept in
increasing-bitmask order, so position ``k`` holds subset ``k + 1``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    BadSplit,
    DimensionMismatch,
    InfeasibleMoments,
    InvalidMoments,
    NoConvergence,
    NonPositiveProbability,
    SizeCap,
    ThetaOverflow,
)

MAX_VARS = 20
CLAMP_EPS = 1e-9
SUM_TOL = 1e-12
MAX_STEP = 5.0


@dataclass(frozen=True, order=True)
class SubsetIndex:
    bits: int
    order: int = field(compare=False, default=-1)

    def __post_init__(self):
        if self.bits < 0:
            raise ValueError("subset bitmask must be non-negative")
        if self.order not in (-1, popcount(self.bits)):
            raise ValueError(f"order {self.order} does not match bitmask {self.bits:#b}")
        object.__setattr__(self, "order", popcount(self.bits))

    @classmethod
    def of(cls, *variables: int) -> "SubsetIndex":
        """Build from 1-based variable labels, e.g. ``SubsetIndex.of(1, 3)``."""
        bits = 0
        for v in variables:
            if v < 1:
                raise ValueError("variables are labelled from 1")
            bits |= 1 << (v - 1)
        return cls(bits)

    def variables(self) -> tuple[int, ...]:
        return tuple(i + 1 for i in range(self.bits.bit_length()) if self.bits >> i & 1)

    def __int__(self):
        return self.bits


def popcount(bits: int) -> int:
    return bin(bits).count("1")


def subset_orders(n: int) -> np.ndarray:
    """Order (popcount) of every bitmask ``0 .. 2**n - 1``."""
    orders = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        orders[1 << i : 1 << (i + 1)] = orders[: 1 << i] + 1
    return orders


def low_indices(n: int, l: int) -> np.ndarray:
    """Non-empty bitmasks of order <= l, increasing."""
    orders = subset_orders(n)
    idx = np.arange(1 << n)
    return idx[(orders >= 1) & (orders <= l)]


def high_indices(n: int, l: int) -> np.ndarray:
    orders = subset_orders(n)
    return np.arange(1 << n)[orders > l]


def state_matrix(n: int) -> np.ndarray:
    """``(2**n, n)`` 0/1 matrix; row ``k`` is the state with bitmask ``k``."""
    k = np.arange(1 << n)
    return ((k[:, None] >> np.arange(n)[None, :]) & 1).astype(np.float64)


def _check_n(n: int) -> None:
    if not 1 <= n <= MAX_VARS:
        raise SizeCap(f"n={n} outside supported range 1..{MAX_VARS}")


def _n_from_len(length: int, nonempty: bool) -> int:
    size = length + 1 if nonempty else length
    n = size.bit_length() - 1
    if size != 1 << n:
        raise DimensionMismatch(f"length {length} is not a valid subset-indexed size")
    return n


# In-place transforms over the subset lattice.  ``a.reshape(-1, 2, 2**i)``
# separates bitmasks by bit i: [:, 0, :] lacks the bit, [:, 1, :] has it.

def _superset_sum(a: np.ndarray, n: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    for i in range(n):
        v = a.reshape(-1, 2, 1 << i)
        v[:, 0, :] += v[:, 1, :]
    return a


def _superset_mobius(a: np.ndarray, n: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    for i in range(n):
        v = a.reshape(-1, 2, 1 << i)
        v[:, 0, :] -= v[:, 1, :]
    return a


def _subset_sum(a: np.ndarray, n: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    for i in range(n):
        v = a.reshape(-1, 2, 1 << i)
        v[:, 1, :] += v[:, 0, :]
    return a


def _subset_mobius(a: np.ndarray, n: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    for i in range(n):
        v = a.reshape(-1, 2, 1 << i)
        v[:, 1, :] -= v[:, 0, :]
    return a


@dataclass(frozen=True, eq=False)
class JointTable:
    """Exact distribution over ``2**n`` binary states (p-coordinates)."""

    n: int
    probs: np.ndarray

    def __post_init__(self):
        _check_n(self.n)
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != (1 << self.n,):
            raise DimensionMismatch(f"expected {1 << self.n} probabilities, got {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs <= 0):
            raise NonPositiveProbability("every cell probability must be strictly positive")
        if abs(probs.sum() - 1.0) > SUM_TOL * max(1, probs.size / 1024):
            raise NonPositiveProbability(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_weights(cls, weights, n: int | None = None, clamp: float = CLAMP_EPS) -> "JointTable":
        """Normalize non-negative weights, clamp cells to ``clamp`` and renormalize.

        This is the entry point for external/empirical data; internal transforms
        never clamp.
        """
        w = np.asarray(weights, dtype=np.float64)
        if n is None:
            n = _n_from_len(w.size, nonempty=False)
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise NonPositiveProbability("weights must be finite, non-negative, not all zero")
        p = w / w.sum()
        if clamp > 0:
            p = np.maximum(p, clamp)
            p = p / p.sum()
        return cls(n, p)

    @classmethod
    def from_samples(cls, samples, n: int | None = None, clamp: float = CLAMP_EPS) -> "JointTable":
        counts = empirical_counts(samples, n)
        return cls.from_weights(counts, n=_n_from_len(counts.size, False), clamp=clamp)

    @classmethod
    def uniform(cls, n: int) -> "JointTable":
        return cls(n, np.full(1 << n, 1.0 / (1 << n)))

    @classmethod
    def product(cls, marginals: Sequence[float]) -> "JointTable":
        """Independent bits with ``P(x_i = 1) = marginals[i]``."""
        m = np.asarray(marginals, dtype=np.float64)
        s = state_matrix(m.size)
        p = np.prod(np.where(s == 1, m, 1 - m), axis=1)
        return cls(m.size, p / p.sum())

    def __getitem__(self, bits) -> float:
        return float(self.probs[int(bits)])

    def eta(self) -> "EtaVector":
        return p_to_eta(self)

    def theta(self) -> "ThetaVector":
        return p_to_theta(self)

    def mixed(self, l: int) -> "MixedCoords":
        return to_mixed(self, l)

    def marginal(self, variables: Sequence[int]) -> "JointTable":
        """Marginal over the given 1-based variables, in the given order."""
        s = np.arange(1 << self.n)
        out = np.zeros(1 << len(variables))
        target = np.zeros_like(s)
        for k, v in enumerate(variables):
            target |= ((s >> (v - 1)) & 1) << k
        np.add.at(out, target, self.probs)
        return JointTable(len(variables), out / out.sum())

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "probs": [float(x) for x in self.probs]})

    @classmethod
    def from_json(cls, text: str) -> "JointTable":
        obj = json.loads(text)
        return cls(int(obj["n"]), np.asarray(obj["probs"], dtype=np.float64))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bitmask", "probability"])
        for k, p in enumerate(self.probs):
            w.writerow([k, repr(float(p))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "JointTable":
        rows = list(csv.reader(io.StringIO(text)))
        if rows and rows[0] and not rows[0][0].strip().lstrip("-").isdigit():
            rows = rows[1:]
        size = len(rows)
        n = _n_from_len(size, nonempty=False)
        probs = np.zeros(size)
        for row in rows:
            probs[int(row[0])] = float(row[1])
        return cls(n, probs)


def empirical_counts(samples, n: int | None = None) -> np.ndarray:
    """Cell counts of an ``N x n`` 0/1 matrix, indexed by bitmask."""
    x = np.asarray(samples)
    if x.ndim != 2:
        raise DimensionMismatch("samples must be a 2-D matrix")
    n = x.shape[1] if n is None else n
    if x.shape[1] != n:
        raise DimensionMismatch(f"samples have {x.shape[1]} columns, expected {n}")
    _check_n(n)
    codes = x.astype(np.int64) @ (1 << np.arange(n, dtype=np.int64))
    return np.bincount(codes, minlength=1 << n).astype(np.float64)


@dataclass(frozen=True, eq=False)
class EtaVector:
    """Expectation parameters ``eta_I = E[prod_{i in I} x_i]`` for non-empty I."""

    n: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != ((1 << self.n) - 1,):
            raise DimensionMismatch(f"expected {(1 << self.n) - 1} eta values, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, bits) -> float:
        return float(self.values[int(bits) - 1])

    def full(self) -> np.ndarray:
        """Length ``2**n`` array with ``eta_empty = 1`` prepended."""
        return np.concatenate([[1.0], self.values])


@dataclass(frozen=True, eq=False)
class ThetaVector:
    """Natural parameters for non-empty I plus the log-partition ``psi``."""

    n: int
    values: np.ndarray
    psi: float = float("nan")

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != ((1 << self.n) - 1,):
            raise DimensionMismatch(f"expected {(1 << self.n) - 1} theta values, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, bits) -> float:
        return float(self.values[int(bits) - 1])


@dataclass(frozen=True, eq=False)
class MixedCoords:
    """l-mixed coordinates: eta for orders <= l, theta for orders > l."""

    n: int
    l: int
    eta_low: np.ndarray
    theta_high: np.ndarray

    def __post_init__(self):
        if not 1 <= self.l <= self.n - 1:
            raise BadSplit(f"split order l={self.l} must satisfy 1 <= l <= n-1 (n={self.n})")
        lo = np.array(self.eta_low, dtype=np.float64)
        hi = np.array(self.theta_high, dtype=np.float64)
        if lo.size != self.low.size or hi.size != self.high.size:
            raise DimensionMismatch("block sizes do not match (n, l)")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "eta_low", lo)
        object.__setattr__(self, "theta_high", hi)

    @property
    def low(self) -> np.ndarray:
        return low_indices(self.n, self.l)

    @property
    def high(self) -> np.ndarray:
        return high_indices(self.n, self.l)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.eta_low, self.theta_high])

    @property
    def dim(self) -> int:
        return (1 << self.n) - 1


def p_to_eta(t: JointTable) -> EtaVector:
    return EtaVector(t.n, _superset_sum(t.probs, t.n)[1:])


def p_to_theta(t: JointTable) -> ThetaVector:
    if np.any(t.probs <= 0):
        raise NonPositiveProbability("theta needs strictly positive probabilities")
    th = _subset_mobius(np.log(t.probs), t.n)
    return ThetaVector(t.n, th[1:], psi=float(-th[0]))


def eta_to_p(e: EtaVector) -> JointTable:
    p = _superset_mobius(e.full(), e.n)
    if np.any(p <= 0):
        bad = int(np.argmin(p))
        raise InvalidMoments(f"eta reconstructs p[{bad}]={p[bad]:.3g} <= 0")
    # Mobius inversion of exact moments sums to one by construction; renormalize
    # only to absorb rounding so the JointTable invariant holds.
    return JointTable(e.n, p / p.sum())


def _log_unnormalized(theta_values: np.ndarray, n: int) -> np.ndarray:
    if not np.all(np.isfinite(theta_values)):
        raise ThetaOverflow("theta contains non-finite values")
    with np.errstate(over="ignore", invalid="ignore"):
        s = _subset_sum(np.concatenate([[0.0], theta_values]), n)
    if not np.all(np.isfinite(s)):
        raise ThetaOverflow("log-potentials overflowed")
    return s


def theta_to_p(th: ThetaVector) -> JointTable:
    s = _log_unnormalized(th.values, th.n)
    p = np.exp(s - logsumexp(s))
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ThetaOverflow("theta too extreme: some cell probabilities underflow to zero")
    return JointTable(th.n, p / p.sum())


def psi(th: ThetaVector) -> float:
    """Log-partition ``log sum_x exp(sum_I theta^I X_I(x))``."""
    return float(logsumexp(_log_unnormalized(th.values, th.n)))


def phi(e: EtaVector) -> float:
    """Negative entropy ``sum_x p log p`` of the distribution with moments e."""
    p = eta_to_p(e).probs
    return float(np.sum(p * np.log(p)))


def legendre_residual(t: JointTable) -> float:
    """``psi(theta) + phi(eta) - <theta, eta>`` for matched coordinates."""
    th, e = p_to_theta(t), p_to_eta(t)
    return psi(th) + phi(e) - float(th.values @ e.values)


def to_mixed(t: JointTable, l: int) -> MixedCoords:
    if not 1 <= l <= t.n - 1:
        raise BadSplit(f"split order l={l} must satisfy 1 <= l <= n-1 (n={t.n})")
    eta = _superset_sum(t.probs, t.n)
    theta = _subset_mobius(np.log(t.probs), t.n)
    return MixedCoords(t.n, l, eta[low_indices(t.n, l)], theta[high_indices(t.n, l)])


def _check_moments(n: int, low: np.ndarray, target: np.ndarray) -> None:
    if np.any(target <= 0) or np.any(target >= 1):
        raise InfeasibleMoments("low-order moments must lie strictly inside (0, 1)")
    pos = {int(b): k for k, b in enumerate(low)}
    for b, k in pos.items():
        for i in range(n):
            if b >> i & 1:
                sub = b & ~(1 << i)
                if sub and target[k] > target[pos[sub]]:
                    raise InfeasibleMoments(
                        f"eta[{b}]={target[k]:.6g} exceeds eta[{sub}]={target[pos[sub]]:.6g}"
                    )


def from_mixed(m: MixedCoords, tol: float = 1e-10, max_iter: int = 500) -> JointTable:
    """Reconstruct the distribution with the given mixed coordinates.

    The high-order theta block is held fixed and the low-order theta block is
    found by damped Newton iteration on ``eta_low(theta) = target``.  The
    Jacobian of that map is the low-low block of the theta Fisher matrix.
    The system is the stationarity condition of the strictly convex function
    ``psi(theta) - <theta_low, target>``, which is used as the line-search merit.
    """
    n = m.n
    low, high = m.low, m.high
    target = m.eta_low
    _check_moments(n, low, target)

    theta = np.zeros(1 << n)
    theta[high] = m.theta_high
    singles = (low & (low - 1)) == 0
    theta[low[singles]] = np.log(target[singles] / (1 - target[singles]))

    def evaluate(th):
        s = _log_unnormalized(th[1:], n)
        lz = logsumexp(s)
        p = np.exp(s - lz)
        eta = _superset_sum(p, n)
        merit = lz - th[low] @ target
        return p, eta, merit

    p, eta, merit = evaluate(theta)
    states = np.arange(1 << n)
    # features[x, k] = 1 when subset low[k] is contained in state x
    features = ((states[:, None] & low[None, :]) == low[None, :]).astype(np.float64)
    resid = np.inf
    for it in range(max_iter + 1):
        grad = eta[low] - target
        resid = float(np.max(np.abs(grad)))
        if it == max_iter:
            break
        # Centered covariance form; eta_{IuJ} - eta_I eta_J cancels badly when
        # moments approach 0 or 1.
        centered = features - eta[low]
        jac = centered.T @ (centered * p[:, None])
        try:
            step = -np.linalg.solve(jac, grad)
        except np.linalg.LinAlgError:
            step = -grad
        if resid < tol:
            # One undamped polishing step, kept only if it helps.
            trial = theta.copy()
            trial[low] += step
            try:
                tp, teta, _ = evaluate(trial)
                if np.all(tp > 0) and np.max(np.abs(teta[low] - target)) < resid:
                    p = tp
            except ThetaOverflow:
                pass
            return JointTable(n, p / p.sum())
        if not np.all(np.isfinite(step)):
            step = -grad
        slope = float(grad @ step)
        if slope >= 0:
            # Newton direction is not a descent direction in floating point;
            # use the gradient instead.
            step, slope = -grad, -float(grad @ grad)
        big = float(np.max(np.abs(step)))
        if big > MAX_STEP:
            # Near-singular Jacobians give huge Newton steps; bound them.
            step, slope = step * (MAX_STEP / big), slope * (MAX_STEP / big)
        t = 1.0
        while True:
            trial = theta.copy()
            trial[low] += t * step
            try:
                tp, teta, tmerit = evaluate(trial)
                # The merit stops resolving decreases near the root, so a
                # smaller residual also accepts the step.
                ok = np.isfinite(tmerit) and np.all(tp > 0) and (
                    tmerit <= merit + 1e-4 * t * slope
                    or (
                        tmerit <= merit + 1e-12 * (1 + abs(merit))
                        and np.max(np.abs(teta[low] - target)) < 0.5 * resid
                    )
                )
            except ThetaOverflow:
                ok = False
            if ok:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # No decrease possible at working precision; accept if the residual
            # is already at rounding level, otherwise report.
            break
        theta, p, eta, merit = trial, tp, teta, tmerit
        if np.max(np.abs(theta[low])) > 700:
            raise InfeasibleMoments("low-order theta diverges; target moments are not attainable")
    if resid < max(tol, 1e-13) * 10 and np.all(p > 0):
        return JointTable(n, p / p.sum())
    raise NoConvergence(
        f"from_mixed did not reach tol={tol:g} (residual {resid:.3g})", iterations=it, residual=resid
    )


def max_abs_diff(a: JointTable, b: JointTable) -> float:
    if a.n != b.n:
        raise DimensionMismatch("tables have different n")
    return float(np.max(np.abs(a.probs - b.probs)))


def tv_distance(a: JointTable, b: JointTable) -> float:
    if a.n != b.n:
        raise DimensionMismatch("tables have different n")
    return 0.5 * float(np.sum(np.abs(a.probs - b.probs)))


def random_table(n: int, rng: np.random.Generator, concentration: float = 1.0) -> JointTable:
    """Dirichlet-distributed positive table; ``concentration=0.5`` is Jeffreys."""
    return JointTable.from_weights(rng.dirichlet(np.full(1 << n, concentration)), n=n)


__all__ = [
    "SubsetIndex",
    "JointTable",
    "EtaVector",
    "ThetaVector",
    "MixedCoords",
    "p_to_eta",
    "p_to_theta",
    "eta_to_p",
    "theta_to_p",
    "to_mixed",
    "from_mixed",
    "psi",
    "phi",
    "legendre_residual",
    "low_indices",
    "high_indices",
    "subset_orders",
    "state_matrix",
    "empirical_counts",
    "random_table",
    "tv_distance",
    "max_abs_diff",
]

