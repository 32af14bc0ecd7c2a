"""Sample-specific edge selection: the chi-square confidence test and
confidence-ranked or random k-fold cross-validation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import erfc

from .boltzmann import BmModel, TrainConfig, _visible_log_probs, train
from .errors import DimensionMismatch, InsufficientSamples, NegativeInput


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x < 0 or np.isnan(x):
        raise NegativeInput(f"chi-square statistic must be non-negative, got {x}")
    return float(erfc(np.sqrt(x / 2.0)))


@dataclass(frozen=True)
class EdgeSet:
    """Unordered variable pairs ``(i, j)``, ``1 <= i < j <= n``."""

    n: int
    edges: frozenset = frozenset()
    scope: str = "visible_visible"

    def __post_init__(self):
        clean = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop ({i}, {j})")
            i, j = min(i, j), max(i, j)
            if i < 1 or j > self.n:
                raise ValueError(f"edge ({i}, {j}) outside 1..{self.n}")
            clean.add((i, j))
        object.__setattr__(self, "edges", frozenset(clean))

    @classmethod
    def complete(cls, n: int) -> "EdgeSet":
        return cls(n, frozenset(combinations(range(1, n + 1), 2)))

    def __len__(self):
        return len(self.edges)

    def __contains__(self, e):
        return (min(e), max(e)) in self.edges

    def sorted(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges:
            m[i - 1, j - 1] = m[j - 1, i - 1] = True
        return m


@dataclass(frozen=True)
class HtestConfig:
    alpha: float = 0.05
    smoothing: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")


@dataclass(frozen=True)
class CvConfig:
    k: int = 5
    grid: tuple | None = None  # edge-count budgets; None gives 11 even steps
    seed: int = 0
    score: str = "heldout_mean_loglik"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.score != "heldout_mean_loglik":
            raise ValueError(f"unknown score {self.score!r}")

    def budgets(self, n_edges: int) -> list[int]:
        if self.grid is None:
            return sorted({int(round(v)) for v in np.linspace(0, n_edges, 11)})
        out = sorted({int(g) for g in self.grid})
        if out and (out[0] < 0 or out[-1] > n_edges):
            raise ValueError(f"budgets must lie in 0..{n_edges}")
        return out


def _binary(samples) -> np.ndarray:
    x = np.asarray(samples)
    if x.ndim != 2:
        raise DimensionMismatch("samples must be a 2-D matrix")
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("samples must be 0/1")
    return x.astype(np.float64)


@dataclass(frozen=True)
class EdgeStat:
    i: int
    j: int
    rho: float
    p_value: float


def edge_statistics(samples, smoothing: float = 0.5) -> list[EdgeStat]:
    """Confidence and two-sided p-value ``2 * sf(N rho)`` for every pair.

    ``rho`` is the edge confidence of the smoothed 2x2 marginal; rows are
    listed in lexicographic pair order.
    """
    x = _binary(samples)
    n_rows, n = x.shape
    if n_rows < 1 or n < 2:
        raise DimensionMismatch("need at least one sample and two variables")
    c11 = x.T @ x
    c1 = np.diag(c11)
    c10 = c1[:, None] - c11  # x_i = 1, x_j = 0
    c01 = c10.T
    c00 = n_rows - c11 - c10 - c01
    cells = np.stack([c00, c01, c10, c11]) + smoothing
    p = cells / cells.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):  # the i == j diagonal is never read
        theta = np.log(p[0]) - np.log(p[1]) - np.log(p[2]) + np.log(p[3])
        rho = theta * theta / np.sum(1.0 / p, axis=0)
    out = []
    for i, j in combinations(range(n), 2):
        r = float(rho[i, j])
        out.append(EdgeStat(i + 1, j + 1, r, min(1.0, 2.0 * chi2_sf_1df(n_rows * r))))
    return out


def cif_htest(samples, cfg: HtestConfig = HtestConfig()) -> EdgeSet:
    """Keep pair ``(i, j)`` iff ``2 * sf(N rho) < alpha``."""
    n = np.shape(samples)[1]
    return EdgeSet(n, frozenset((s.i, s.j) for s in edge_statistics(samples, cfg.smoothing)
                                if s.p_value < cfg.alpha))


def htest_csv(samples, cfg: HtestConfig = HtestConfig()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "rho", "p_value", "selected"])
    for s in edge_statistics(samples, cfg.smoothing):
        w.writerow([s.i, s.j, repr(s.rho), repr(s.p_value), int(s.p_value < cfg.alpha)])
    return buf.getvalue()


def cif_rank(samples, candidate_edges: EdgeSet | None = None, smoothing: float = 0.5) -> list[tuple[tuple[int, int], float]]:
    """Candidate edges by descending confidence, ties in lexicographic order."""
    stats = edge_statistics(samples, smoothing)
    keep = None if candidate_edges is None else candidate_edges.edges
    ranked = [((s.i, s.j), s.rho) for s in stats if keep is None or (s.i, s.j) in keep]
    return sorted(ranked, key=lambda e: (-e[1], e[0]))


def model_complexity_ratio(selected: EdgeSet, all_rho: dict) -> float:
    """Share of the total confidence carried by the selected edges."""
    total = float(sum(all_rho.values()))
    if total <= 0:
        return 0.0 if not len(selected) else 1.0
    return float(sum(all_rho[e] for e in selected.edges) / total)


def masked_model(n: int, edges: EdgeSet, n_h: int = 0, rng: np.random.Generator | None = None) -> BmModel:
    """VBM (no hidden units) or vRBM whose visible-visible edges are ``edges``."""
    kind = "VBM" if n_h == 0 else "vRBM"
    return BmModel.create(n, n_h, kind, rng=rng, mask_U=edges.mask())


def mean_loglik(model: BmModel, samples) -> float:
    x = np.asarray(samples, dtype=np.int64)
    codes = x @ (1 << np.arange(model.n_x, dtype=np.int64))
    return float(np.mean(_visible_log_probs(model)[codes]))


def fold_indices(n_rows: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    return np.array_split(rng.permutation(n_rows), k)


@dataclass
class CvResult:
    edges: EdgeSet
    budget: int
    table: list = field(default_factory=list)  # (budget, fold, score)
    order: list = field(default_factory=list)  # edges in the order they are added

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["budget", "fold", "score"])
        for b, f, s in self.table:
            w.writerow([b, f, repr(s)])
        return buf.getvalue()

    def mean_scores(self) -> dict[int, float]:
        out = {}
        for b in sorted({r[0] for r in self.table}):
            out[b] = float(np.mean([r[2] for r in self.table if r[0] == b]))
        return out


def edge_order(samples, method: str, rng: np.random.Generator, smoothing: float = 0.5) -> list[tuple[int, int]]:
    """Edges in the order a budget prefix takes them."""
    n = np.shape(samples)[1]
    if method == "cif":
        return [e for e, _ in cif_rank(samples, smoothing=smoothing)]
    if method == "rand":
        full = EdgeSet.complete(n).sorted()
        return [full[k] for k in rng.permutation(len(full))]
    raise ValueError(f"unknown selection method {method!r}")


def cv_select(samples, method: str, cfg: CvConfig = CvConfig(),
              train_cfg: TrainConfig = TrainConfig(), n_h: int = 0) -> CvResult:
    """Pick an edge budget by k-fold held-out mean log-likelihood.

    ``cif`` takes the top-confidence prefix of each size, ``rand`` a prefix
    of a seeded random permutation.
    """
    x = _binary(samples)
    n_rows, n = x.shape
    if n_rows < cfg.k:
        raise InsufficientSamples(f"{n_rows} samples cannot fill {cfg.k} folds")
    rng = np.random.default_rng(cfg.seed)
    order = edge_order(x, method, rng)
    folds = fold_indices(n_rows, cfg.k, rng)
    init_rng = np.random.default_rng([cfg.seed, 1])
    res = CvResult(EdgeSet(n), 0, order=order)
    for budget in cfg.budgets(len(order)):
        edges = EdgeSet(n, frozenset(order[:budget]))
        for f, held in enumerate(folds):
            fit_rows = np.setdiff1d(np.arange(n_rows), held, assume_unique=True)
            model = masked_model(n, edges, n_h, init_rng if n_h else None)
            fitted = train(model, x[fit_rows], train_cfg).model
            res.table.append((budget, f, mean_loglik(fitted, x[held])))
    means = res.mean_scores()
    best = max(means, key=lambda b: (means[b], -b))  # ties go to the smaller model
    res.budget, res.edges = best, EdgeSet(n, frozenset(order[:best]))
    return res


__all__ = [
    "CvConfig", "CvResult", "EdgeSet", "EdgeStat", "HtestConfig",
    "chi2_sf_1df", "cif_htest", "cif_rank", "cv_select", "edge_order", "edge_statistics",
    "fold_indices", "htest_csv", "masked_model", "mean_loglik", "model_complexity_ratio",
]
