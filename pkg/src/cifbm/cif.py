"""Tailored mixed coordinates, FID preservation and per-parameter confidence."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.stats import ortho_group

from .coords import (
    JointTable,
    MixedCoords,
    from_mixed,
    low_indices,
    p_to_theta,
    to_mixed,
)
from .errors import DimensionMismatch, NonPositiveProbability
from .fisher import fisher_mixed

TABLE1_L = 2


@dataclass(frozen=True)
class TailoredCoords:
    base: MixedCoords
    l: int

    def __post_init__(self):
        if np.any(self.base.theta_high != 0):
            raise ValueError("tailored coordinates must have theta_high identically zero")

    @property
    def free_parameters(self) -> int:
        return sum(comb(self.base.n, i) for i in range(1, self.l + 1))

    @classmethod
    def of(cls, t: JointTable, l: int) -> "TailoredCoords":
        m = to_mixed(t, l)
        return cls(MixedCoords(t.n, l, m.eta_low, np.zeros_like(m.theta_high)), l)

    def table(self) -> JointTable:
        return from_mixed(self.base)


@dataclass(frozen=True)
class PerturbationConfig:
    """Settings for the FID-preservation simulation.

    ``a`` scales the analytic perturbation (``a*sqrt(p)`` on significant
    cells, ``a*p`` elsewhere); ``eps`` is the weight of insignificant cells.
    ``sample_factor`` sets ``N = sample_factor * 2**n`` for the empirical
    table; ``clamp`` smooths its empty cells (defaults to ``eps``).
    """

    a: float = 0.1
    eps: float = 1e-6
    seed: int = 0
    sample_factor: int = 10
    clamp: float | None = None

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.sample_factor < 1:
            raise ValueError("sample_factor must be at least 1")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp must be positive")

    @property
    def smoothing(self) -> float:
        return self.eps if self.clamp is None else self.clamp


def tailor(t: JointTable, l: int) -> JointTable:
    """Keep the eta coordinates up to order ``l``, zero the theta ones above it."""
    return TailoredCoords.of(t, l).table()


def _check_pair(a: JointTable, b: JointTable) -> None:
    if a.n != b.n:
        raise DimensionMismatch(f"n mismatch: {a.n} vs {b.n}")


def subset_fid_ratio(p_t: JointTable, p_s: JointTable, l: int, keep) -> float:
    """Share of the mixed-coordinate FID carried by the positions in ``keep``.

    Positions index the mixed vector (low block first).  The quadratic form
    uses ``G_zeta`` at ``p_s``; a zero total gives 1.
    """
    _check_pair(p_t, p_s)
    delta = to_mixed(p_t, l).vector() - to_mixed(p_s, l).vector()
    g = fisher_mixed(p_s, l).entries
    total = float(delta @ g @ delta)
    if total <= 0:
        return 1.0
    keep = np.asarray(keep, dtype=np.int64)
    part = float(delta[keep] @ g[np.ix_(keep, keep)] @ delta[keep])
    return float(np.clip(np.sqrt(max(part, 0.0) / total), 0.0, 1.0))


def fid_preservation_ratio(p_t: JointTable, p_s: JointTable, l: int) -> float:
    """FID over the low-order eta block divided by FID over all mixed coordinates."""
    _check_pair(p_t, p_s)
    return subset_fid_ratio(p_t, p_s, l, np.arange(low_indices(p_t.n, l).size))


def param_ratio(n: int, l: int = TABLE1_L) -> float:
    return low_indices(n, l).size / ((1 << n) - 1)


def sparse_jeffreys_target(n: int, eps: float, rng: np.random.Generator) -> tuple[JointTable, np.ndarray]:
    """Table with ``2**(n//2)`` Jeffreys-distributed cells and the rest at ``eps``.

    Returns the table and the significant-cell mask.
    """
    k = 1 << (n // 2)
    cells = rng.choice(1 << n, size=k, replace=False)
    w = np.full(1 << n, eps)
    w[cells] = rng.dirichlet(np.full(k, 0.5))
    mask = np.zeros(1 << n, dtype=bool)
    mask[cells] = True
    return JointTable.from_weights(w, n=n, clamp=0), mask


def empirical_estimate(p_t: JointTable, n_samples: int, clamp: float, rng: np.random.Generator) -> JointTable:
    counts = rng.multinomial(n_samples, p_t.probs).astype(np.float64)
    return JointTable.from_weights(counts, n=p_t.n, clamp=clamp)


def perturb(p_t: JointTable, significant, cfg: PerturbationConfig, rng: np.random.Generator) -> JointTable:
    """Analytic perturbation: shifts of size ``a*sqrt(p)`` on significant cells
    and ``a*p`` elsewhere, uniform random signs and magnitudes."""
    p = p_t.probs
    scale = np.where(np.asarray(significant, dtype=bool), cfg.a * np.sqrt(p), cfg.a * p)
    q = p + scale * rng.uniform(-1.0, 1.0, size=p.size)
    return JointTable.from_weights(np.maximum(q, 0.0), n=p_t.n, clamp=cfg.smoothing)


def replicate_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass
class Table1Result:
    rows: list = field(default_factory=list)  # (n, replicate, param_ratio, fid_ratio)

    def summary(self) -> dict:
        out = {}
        for n in sorted({r[0] for r in self.rows}):
            vals = np.array([r[3] for r in self.rows if r[0] == n])
            out[str(n)] = {
                "param_ratio": round(param_ratio(n), 3),
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "replicates": int(vals.size),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "replicate", "param_ratio", "fid_ratio"])
        for n, r, pr, fr in self.rows:
            w.writerow([n, r, repr(pr), repr(fr)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def table1_replicate(cfg: PerturbationConfig, n: int, replicate: int) -> float:
    rng = replicate_rng(cfg.seed, n, replicate)
    p_t, _ = sparse_jeffreys_target(n, cfg.eps, rng)
    p_s = empirical_estimate(p_t, cfg.sample_factor << n, cfg.smoothing, rng)
    return fid_preservation_ratio(p_t, p_s, TABLE1_L)


def simulate_table1(cfg: PerturbationConfig, n_vars, replicates: int) -> Table1Result:
    """FID preserved by the 2-tailored coordinates, per n and replicate."""
    ns = [n_vars] if np.isscalar(n_vars) else list(n_vars)
    for n in ns:
        if not 3 <= n <= 7:
            raise ValueError(f"n_vars must lie in 3..7, got {n}")
    res = Table1Result()
    for n in ns:
        pr = param_ratio(n)
        for r in range(replicates):
            res.rows.append((n, r, pr, table1_replicate(cfg, n, r)))
    return res


def expected_subset_share(g: np.ndarray, keep, directions: np.ndarray) -> float:
    """Expected share of FID kept by ``keep`` over perturbation ``directions``.

    Each row of ``directions`` is a unit step in mixed coordinates; the share
    is the square root of mean kept quadratic form over mean full one.
    """
    keep = np.asarray(keep, dtype=np.int64)
    full = np.einsum("ki,ij,kj->k", directions, g, directions)
    d = directions[:, keep]
    part = np.einsum("ki,ij,kj->k", d, g[np.ix_(keep, keep)], d)
    return float(np.sqrt(part.mean() / full.mean()))


def isotropic_directions(dim: int, n_rotations: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors uniform on the sphere, stratified as rows of Haar rotations."""
    if n_rotations < 1:
        raise ValueError("n_rotations must be positive")
    return np.vstack([ortho_group.rvs(dim, random_state=rng) for _ in range(n_rotations)])


def optimality_check(p_t: JointTable, l: int, n_alternatives: int, rng: np.random.Generator,
                     n_rotations: int = 20) -> tuple[float, np.ndarray]:
    """Expected kept-FID share of the low eta block and of random same-size subsets.

    Neighbours of ``p_t`` are drawn on a small sphere around its mixed
    coordinates; every candidate subset is scored on the same draws.
    """
    g = fisher_mixed(p_t, l).entries
    dim = g.shape[0]
    k = low_indices(p_t.n, l).size
    dirs = isotropic_directions(dim, n_rotations, rng)
    ours = expected_subset_share(g, np.arange(k), dirs)
    alts = np.array([
        expected_subset_share(g, np.sort(rng.choice(dim, size=k, replace=False)), dirs)
        for _ in range(n_alternatives)
    ])
    return ours, alts


def edge_confidence(p_ij: JointTable) -> float:
    """``theta^{ij} * g * theta^{ij}`` for a two-variable table."""
    if p_ij.n != 2:
        raise DimensionMismatch(f"edge confidence needs a 2-variable table, got n={p_ij.n}")
    p = p_ij.probs
    if np.any(p <= 0):
        raise NonPositiveProbability("edge confidence needs positive cells")
    th = p_to_theta(p_ij).values[2]  # bitmask 3 = {i, j}
    g = 1.0 / np.sum(1.0 / p)
    return float(th * g * th)


__all__ = [
    "PerturbationConfig",
    "TailoredCoords",
    "Table1Result",
    "edge_confidence",
    "empirical_estimate",
    "expected_subset_share",
    "fid_preservation_ratio",
    "isotropic_directions",
    "optimality_check",
    "param_ratio",
    "perturb",
    "replicate_rng",
    "simulate_table1",
    "sparse_jeffreys_target",
    "subset_fid_ratio",
    "table1_replicate",
    "tailor",
]
