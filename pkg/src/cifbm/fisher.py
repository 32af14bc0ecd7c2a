"""Fisher information matrices, Fisher information distance and KL divergence."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .coords import (
    JointTable,
    MixedCoords,
    _superset_sum,
    from_mixed,
    high_indices,
    low_indices,
    p_to_eta,
    p_to_theta,
    subset_orders,
    theta_to_p,
    to_mixed,
    ThetaVector,
)
from .errors import BadSplit, DimensionMismatch, NonPositiveProbability, SingularBlock

SINGULAR_TOL = 1e-12
COORD_SYSTEMS = ("theta", "eta", "mixed")


@dataclass(frozen=True, eq=False)
class FisherMatrix:
    coord_system: str
    index_order: np.ndarray
    entries: np.ndarray
    l: int | None = None

    @property
    def tag(self) -> str:
        return f"mixed({self.l})" if self.coord_system == "mixed" else self.coord_system

    def block(self, rows, cols=None) -> np.ndarray:
        """Sub-matrix addressed by bitmasks (not positions)."""
        pos = {int(b): k for k, b in enumerate(self.index_order)}
        r = [pos[int(b)] for b in rows]
        c = r if cols is None else [pos[int(b)] for b in cols]
        return self.entries[np.ix_(r, c)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for i, j in np.ndindex(self.entries.shape):
            w.writerow([i, j, repr(float(self.entries[i, j]))])
        return buf.getvalue()

    def manifest(self) -> str:
        return json.dumps(
            {"coord_system": self.tag, "index_order": [int(b) for b in self.index_order]}
        )


def _nonempty(n: int) -> np.ndarray:
    return np.arange(1, 1 << n)


def fisher_theta(t: JointTable) -> FisherMatrix:
    """``g_IJ = eta_{I u J} - eta_I eta_J``.

    Evaluated as the covariance ``E[(X_I - eta_I)(X_J - eta_J)]``, which is
    the same quantity without the cancellation of the product form when
    moments sit near 0 or 1.
    """
    eta = _superset_sum(t.probs, t.n)
    idx = _nonempty(t.n)
    states = np.arange(1 << t.n)
    centered = ((states[:, None] & idx[None, :]) == idx[None, :]) - eta[idx]
    g = centered.T @ (centered * t.probs[:, None])
    return FisherMatrix("theta", idx, 0.5 * (g + g.T))


def mobius_matrix(n: int) -> np.ndarray:
    """``M[K, I] = (-1)^{|I - K|}`` if K is a subset of I, else 0; I non-empty."""
    ks = np.arange(1 << n)[:, None]
    idx = _nonempty(n)[None, :]
    inside = (ks & ~idx) == 0
    orders = subset_orders(n)
    sign = np.where(orders[idx ^ ks] % 2 == 0, 1.0, -1.0)
    return np.where(inside, sign, 0.0)


def fisher_eta(t: JointTable) -> FisherMatrix:
    """``g^IJ = sum_{K in I n J} (-1)^{|I-K| + |J-K|} / p_K``."""
    if np.any(t.probs <= 0):
        raise NonPositiveProbability("eta Fisher matrix needs positive probabilities")
    m = mobius_matrix(t.n)
    g = m.T @ (m / t.probs[:, None])
    return FisherMatrix("eta", _nonempty(t.n), g)


def _spd_inverse(mat: np.ndarray, what: str) -> np.ndarray:
    if mat.size == 0:
        return mat.copy()
    evals = np.linalg.eigvalsh(mat)
    if evals[0] <= SINGULAR_TOL * max(evals[-1], 1e-300):
        raise SingularBlock(f"{what} is numerically singular (eigenvalues {evals[0]:.3g}..{evals[-1]:.3g})")
    factor = scipy.linalg.cho_factor(mat)
    inv = scipy.linalg.cho_solve(factor, np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def fisher_mixed(t: JointTable, l: int) -> FisherMatrix:
    """Block-diagonal Fisher matrix of the l-mixed coordinates.

    ``A`` is the inverse of the low-order block of ``G_eta^{-1} = G_theta``;
    ``B`` is the inverse of the high-order block of ``G_theta^{-1} = G_eta``.
    """
    if not 1 <= l <= t.n - 1:
        raise BadSplit(f"split order l={l} must satisfy 1 <= l <= n-1 (n={t.n})")
    low, high = low_indices(t.n, l), high_indices(t.n, l)
    g_theta = fisher_theta(t).entries
    g_eta = fisher_eta(t).entries
    a = _spd_inverse(g_theta[np.ix_(low - 1, low - 1)], "low-order block of G_theta")
    b = _spd_inverse(g_eta[np.ix_(high - 1, high - 1)], "high-order block of G_eta")
    k = low.size
    dim = (1 << t.n) - 1
    g = np.zeros((dim, dim))
    g[:k, :k] = a
    g[k:, k:] = b
    return FisherMatrix("mixed", np.concatenate([low, high]), g, l=l)


def mixed_blocks(g: FisherMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Split a mixed Fisher matrix into its (A, B) diagonal blocks."""
    k = low_indices(int(np.log2(g.index_order.size + 1)), g.l).size
    return g.entries[:k, :k], g.entries[k:, k:]


def coordinates(t: JointTable, coord_system: str, l: int | None = None) -> np.ndarray:
    if coord_system == "theta":
        return p_to_theta(t).values
    if coord_system == "eta":
        return p_to_eta(t).values
    if coord_system == "mixed":
        if l is None:
            raise BadSplit("mixed coordinates need a split order l")
        return to_mixed(t, l).vector()
    raise ValueError(f"unknown coordinate system {coord_system!r}")


def fisher(t: JointTable, coord_system: str, l: int | None = None) -> FisherMatrix:
    if coord_system == "theta":
        return fisher_theta(t)
    if coord_system == "eta":
        return fisher_eta(t)
    if coord_system == "mixed":
        if l is None:
            raise BadSplit("mixed coordinates need a split order l")
        return fisher_mixed(t, l)
    raise ValueError(f"unknown coordinate system {coord_system!r}")


def _log_p_function(t: JointTable, coord_system: str, l: int | None):
    n = t.n
    if coord_system == "theta":
        base = p_to_theta(t).values

        def log_p(xi):
            return np.log(theta_to_p(ThetaVector(n, xi)).probs)

        return base, log_p
    if coord_system == "eta":
        base = p_to_eta(t).values
        m = mobius_matrix(n)

        def log_p(xi):
            # p is linear in eta: p(base + d) = p + M d.  Evaluating the shift
            # against the stored table avoids cancellation in the Mobius sum.
            return np.log(t.probs + m @ (xi - base))

        return base, log_p
    if coord_system == "mixed":
        m = to_mixed(t, l)
        k = m.eta_low.size
        base = m.vector()

        def log_p(xi):
            mm = MixedCoords(n, l, xi[:k], xi[k:])
            return np.log(from_mixed(mm, tol=1e-14, max_iter=200).probs)

        return base, log_p
    raise ValueError(f"unknown coordinate system {coord_system!r}")


def fisher_oracle(
    t: JointTable, coord_system: str, step: float = 1e-5, l: int | None = None
) -> FisherMatrix:
    """Score-covariance Fisher matrix from numerically differentiated log p.

    Scores use the five-point central difference
    ``(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h``.  In the eta system
    ``h`` is capped at ``1e-3 * min(p)``.  Test oracle only.
    """
    base, log_p = _log_p_function(t, coord_system, l)
    if coord_system == "eta":
        # An eta shift moves cells additively; cap it so no cell moves by more
        # than 0.1% of itself.
        step = min(step, 1e-3 * float(t.probs.min()))
    d = base.size
    scores = np.empty((d, 1 << t.n))
    for i in range(d):
        def at(k):
            xi = base.copy()
            xi[i] += k * step
            return log_p(xi)

        scores[i] = (-at(2) + 8 * at(1) - 8 * at(-1) + at(-2)) / (12 * step)
    g = (scores * t.probs) @ scores.T
    g = 0.5 * (g + g.T)
    if coord_system == "mixed":
        m = to_mixed(t, l)
        order = np.concatenate([m.low, m.high])
    else:
        order = _nonempty(t.n)
    return FisherMatrix(coord_system, order, g, l=l if coord_system == "mixed" else None)


@dataclass(frozen=True)
class FidResult:
    distance: float
    contributions: np.ndarray  # per-coordinate d_i * G_ii * d_i
    delta: np.ndarray


def fid(t1: JointTable, t2: JointTable, coord_system: str = "theta", l: int | None = None) -> FidResult:
    """Quadratic-form Fisher information distance with G evaluated at ``t1``."""
    if t1.n != t2.n:
        raise DimensionMismatch(f"n mismatch: {t1.n} vs {t2.n}")
    delta = coordinates(t1, coord_system, l) - coordinates(t2, coord_system, l)
    g = fisher(t1, coord_system, l).entries
    sq = float(delta @ g @ delta)
    return FidResult(float(np.sqrt(max(sq, 0.0))), delta * np.diag(g) * delta, delta)


def kl(t1: JointTable, t2: JointTable) -> float:
    """``KL(t1 || t2) = sum_x t1 log(t1 / t2)``."""
    if t1.n != t2.n:
        raise DimensionMismatch(f"n mismatch: {t1.n} vs {t2.n}")
    if np.any(t2.probs <= 0):
        raise NonPositiveProbability("KL needs a positive second argument")
    p, q = t1.probs, t2.probs
    nz = p > 0
    return float(max(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))), 0.0))
