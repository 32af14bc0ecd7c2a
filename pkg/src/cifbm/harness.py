"""Seeded experiment runner: targets, datasets, density-estimation protocols,
Hamming evaluation and result files."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .boltzmann import BmModel, TrainConfig, _kl_weights, _sweep, _visible_log_probs, train
from .cif import PerturbationConfig, replicate_rng, simulate_table1
from .coords import JointTable
from .errors import ConfigError, ParseError
from .selection import (
    CvConfig,
    EdgeSet,
    HtestConfig,
    cif_htest,
    cv_select,
    edge_order,
    edge_statistics,
    masked_model,
    model_complexity_ratio,
)

EXPERIMENTS = ("fid_table", "vbm_density", "vrbm_density", "real_data")
METHODS = ("full", "rand_cv", "cif_cv", "cif_htest", "rbm_baseline")
METRICS = ("kl_to_target", "kl_to_sample", "d_ham", "fid_ratio", "complexity_ratio")
RECORD_COLUMNS = ("experiment", "seed", "method", "N", "replicate", "metric", "value")
EPS_P = 1e-9


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    n_vars: int | list = 10
    n_hidden: int = 0
    sample_sizes: list = field(default_factory=lambda: [100])
    replicates: int = 1
    methods: list = field(default_factory=lambda: ["full"])
    train_cfg: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "."
    cv: dict = field(default_factory=dict)  # CvConfig fields except seed
    htest: dict = field(default_factory=dict)  # HtestConfig fields
    perturbation: dict = field(default_factory=dict)  # PerturbationConfig fields except seed
    sweep: bool = False  # also record every budget of the cif/rand edge orders
    data_path: str | None = None  # real_data only
    hamming: dict = field(default_factory=dict)  # n_gen, burn_in, thin

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if int(self.replicates) < 1:
            raise ConfigError("replicates must be at least 1")
        if self.experiment != "fid_table" and not self.sample_sizes:
            raise ConfigError("sample_sizes must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        try:
            self.training()
            self.cv_config()
            self.htest_config()
            self.perturbation_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment' key")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def training(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train_cfg})

    def cv_config(self) -> CvConfig:
        c = dict(self.cv)
        if "grid" in c and c["grid"] is not None:
            c["grid"] = tuple(c["grid"])
        return CvConfig(**{"seed": self.seed, **c})

    def htest_config(self) -> HtestConfig:
        return HtestConfig(**self.htest)

    def perturbation_config(self) -> PerturbationConfig:
        return PerturbationConfig(**{"seed": self.seed, **self.perturbation})


@dataclass(frozen=True)
class RunRecord:
    experiment: str
    seed: int
    method: str
    N: int
    replicate: int
    metric: str
    value: float


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.experiment, r.seed, r.method, r.N, r.replicate, r.metric, repr(float(r.value))])
    return buf.getvalue()


def summarize(records) -> dict:
    """Mean and std per (method, N, metric)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.N, r.metric), []).append(r.value)
    out: dict = {}
    for (method, n, metric), vals in sorted(groups.items()):
        v = np.asarray(vals, dtype=np.float64)
        out.setdefault(method, {}).setdefault(str(n), {})[metric] = {
            "mean": float(v.mean()), "std": float(v.std()), "count": int(v.size)}
    return out


def write_records(records, path: str) -> None:
    """Write the records CSV at ``path`` and the summary JSON beside it."""
    records = list(records)
    with open(path, "w", newline="") as f:
        f.write(records_csv(records))
    stem = path[:-4] if path.endswith(".csv") else path
    with open(stem + "_summary.json", "w") as f:
        json.dump(summarize(records), f, indent=2, sort_keys=True)
        f.write("\n")


def read_records(path: str) -> list[RunRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [RunRecord(r["experiment"], int(r["seed"]), r["method"], int(r["N"]), int(r["replicate"]),
                      r["metric"], float(r["value"])) for r in rows]


def load_binary_csv(path: str, header: bool | None = None) -> np.ndarray:
    """Strict 0/1 matrix reader.

    ``header=None`` skips the first row only when it is not all 0/1.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    rows = [r for r in rows if r]
    if header is None:
        header = bool(rows) and any(c.strip() not in ("0", "1") for c in rows[0])
    start = 1 if header else 0
    out = []
    width = None
    for r, row in enumerate(rows[start:], start=start + 1):
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", r, len(row))
        vals = []
        for c, cell in enumerate(row, start=1):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ParseError(f"non-binary value {cell!r}", r, c)
            vals.append(cell == "1")
        out.append(vals)
    return np.array(out, dtype=np.int8).reshape(len(out), width or 0)


def gen_jeffreys_target(n: int, rng: np.random.Generator, eps_p: float = EPS_P) -> JointTable:
    """Symmetric Dirichlet(1/2) draw over the ``2**n`` cells, clamped to ``eps_p``."""
    if n > 12:
        raise ConfigError(f"Jeffreys targets are limited to n <= 12, got {n}")
    g = rng.standard_gamma(0.5, size=1 << n)
    if g.sum() <= 0:
        g = np.ones(1 << n)
    return JointTable.from_weights(g, n=n, clamp=eps_p)


def sample_dataset(t: JointTable, N: int, rng: np.random.Generator) -> np.ndarray:
    """``N`` i.i.d. rows by inverse CDF over the cells."""
    cdf = np.cumsum(t.probs)
    codes = np.searchsorted(cdf, rng.random(N) * cdf[-1], side="right")
    codes = np.minimum(codes, t.probs.size - 1)
    return ((codes[:, None] >> np.arange(t.n)) & 1).astype(np.int8)


def empirical_weights(samples, n: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.int64)
    codes = x @ (1 << np.arange(n, dtype=np.int64))
    counts = np.bincount(codes, minlength=1 << n).astype(np.float64)
    return counts / counts.sum()


def gibbs_generate(model: BmModel, n_gen: int, rng: np.random.Generator, burn_in: int = 1000,
                   thin: int = 10, chains: int = 100) -> np.ndarray:
    """Visible rows from parallel Gibbs chains after burn-in, every ``thin`` sweeps."""
    if n_gen <= 0:
        return np.zeros((0, model.n_x), dtype=np.int8)
    chains = max(1, min(chains, n_gen))
    w, bias, _ = model.full()
    state = (rng.random((chains, model.n_units)) < 0.5).astype(np.float64)
    units = range(model.n_units)
    for _ in range(burn_in):
        _sweep(w, bias, state, rng, units)
    out = []
    while sum(len(o) for o in out) < n_gen:
        for _ in range(thin):
            _sweep(w, bias, state, rng, units)
        out.append(state[:, :model.n_x].copy())
    return np.concatenate(out)[:n_gen].astype(np.int8)


def min_hamming(data, generated) -> float:
    """Mean over data rows of the distance to the nearest generated row."""
    d = np.asarray(data, dtype=np.float64)
    g = np.asarray(generated, dtype=np.float64)
    if d.shape[0] == 0:
        return 0.0
    best = np.full(d.shape[0], np.inf)
    for start in range(0, g.shape[0], 2048):
        gb = g[start:start + 2048]
        agree = d @ gb.T + (1 - d) @ (1 - gb).T
        best = np.minimum(best, d.shape[1] - agree.max(axis=1))
    return float(best.mean())


def hamming_eval(data, model: BmModel, N_gen: int | None = None, rng: np.random.Generator | None = None,
                 burn_in: int = 1000, thin: int = 10) -> float:
    """Averaged minimum Hamming distance between data rows and model samples."""
    data = np.asarray(data)
    rng = np.random.default_rng(0) if rng is None else rng
    n_gen = data.shape[0] if N_gen is None else N_gen
    return min_hamming(data, gibbs_generate(model, n_gen, rng, burn_in, thin))


# -- density experiments ---------------------------------------------------------

def _kl_target(target: JointTable, model: BmModel) -> float:
    return _kl_weights(target.probs, _visible_log_probs(model))


class _Recorder:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rows: list[RunRecord] = []

    def add(self, method, N, rep, metric, value):
        self.rows.append(RunRecord(self.cfg.experiment, self.cfg.seed, method, int(N), int(rep), metric, float(value)))


def _fit(n, edges, n_h, data, tcfg, init_rng, kind=None):
    if kind == "RBM":
        model = BmModel.create(n, n_h, "RBM", rng=init_rng)
    else:
        model = masked_model(n, edges, n_h, init_rng if n_h else None)
    return train(model, data, tcfg).model


def _density_cell(cfg: ExperimentConfig, rec: _Recorder, target: JointTable, N: int, rep: int) -> None:
    n, n_h = target.n, cfg.n_hidden
    tcfg = cfg.training()
    rng = replicate_rng(cfg.seed, rep, N)
    data = sample_dataset(target, N, rng)
    q = empirical_weights(data, n)
    rho = {(s.i, s.j): s.rho for s in edge_statistics(data, cfg.htest_config().smoothing)}
    cv_cfg = cfg.cv_config()
    cv_cfg = CvConfig(k=cv_cfg.k, grid=cv_cfg.grid, seed=int(rng.integers(2**31)), score=cv_cfg.score)

    def record(method, model, edges):
        rec.add(method, N, rep, "kl_to_target", _kl_target(target, model))
        rec.add(method, N, rep, "kl_to_sample", _kl_weights(q, _visible_log_probs(model)))
        if edges is not None:
            rec.add(method, N, rep, "complexity_ratio", model_complexity_ratio(edges, rho))

    def init():
        return replicate_rng(cfg.seed, rep, N, 7)

    full = EdgeSet.complete(n)
    for method in cfg.methods:
        if method == "full":
            record("full", _fit(n, full, n_h, data, tcfg, init()), full)
        elif method == "rbm_baseline":
            if n_h == 0:
                raise ConfigError("rbm_baseline needs n_hidden > 0")
            record("rbm_baseline", _fit(n, EdgeSet(n), n_h, data, tcfg, init(), kind="RBM"), EdgeSet(n))
        elif method in ("rand_cv", "cif_cv"):
            res = cv_select(data, method.split("_")[0], cv_cfg, tcfg, n_h=n_h)
            record(method, _fit(n, res.edges, n_h, data, tcfg, init()), res.edges)
        elif method == "cif_htest":
            edges = cif_htest(data, cfg.htest_config())
            record(method, _fit(n, edges, n_h, data, tcfg, init()), edges)
    if cfg.sweep:
        for method in ("cif", "rand"):
            order = edge_order(data, method, replicate_rng(cfg.seed, rep, N, 11))
            for b in cv_cfg.budgets(len(order)):
                edges = EdgeSet(n, frozenset(order[:b]))
                record(f"{method}_sweep:b={b}", _fit(n, edges, n_h, data, tcfg, init()), edges)


def _run_density(cfg: ExperimentConfig) -> list[RunRecord]:
    n = int(cfg.n_vars)
    if n + cfg.n_hidden > 20:
        raise ConfigError(f"n_vars + n_hidden = {n + cfg.n_hidden} exceeds 20")
    rec = _Recorder(cfg)
    for rep in range(cfg.replicates):
        target = gen_jeffreys_target(n, replicate_rng(cfg.seed, rep))
        for N in cfg.sample_sizes:
            _density_cell(cfg, rec, target, int(N), rep)
    return rec.rows


def run_vbm_density(cfg: ExperimentConfig) -> list[RunRecord]:
    """Full VBM versus selected VBMs on Jeffreys targets; one cell per (N, replicate)."""
    if cfg.n_hidden:
        raise ConfigError("vbm_density takes no hidden units")
    if int(cfg.n_vars) > 12:
        raise ConfigError("vbm_density needs n_vars <= 12")
    return _run_density(cfg)


def run_vrbm_density(cfg: ExperimentConfig) -> list[RunRecord]:
    """RBM baseline and vRBMs whose visible-visible edges are selected."""
    if cfg.n_hidden < 1:
        raise ConfigError("vrbm_density needs n_hidden >= 1")
    return _run_density(cfg)


def run_real_data(cfg: ExperimentConfig) -> list[RunRecord]:
    """Seeded 80/20 split of a binary matrix, scored by D_ham on the test rows."""
    if not cfg.data_path:
        raise ConfigError("real_data needs data_path")
    x = load_binary_csv(cfg.data_path)
    n = x.shape[1]
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(x.shape[0])
    cut = int(round(0.8 * x.shape[0]))
    train_x, test_x = x[perm[:cut]], x[perm[cut:]]
    tcfg = cfg.training()
    h = cfg.hamming
    rec = _Recorder(cfg)
    for method in cfg.methods:
        if method in ("rand_cv", "cif_cv") and n > 20:
            raise ConfigError("cross-validated selection needs exact likelihoods (n <= 20)")
        if method == "full":
            edges = EdgeSet.complete(n)
        elif method == "rbm_baseline":
            edges = None
        elif method == "cif_htest":
            edges = cif_htest(train_x, cfg.htest_config())
        else:
            edges = cv_select(train_x, method.split("_")[0], cfg.cv_config(), tcfg, n_h=cfg.n_hidden).edges
        init = np.random.default_rng([cfg.seed, 7])
        if edges is None:
            model = train(BmModel.create(n, cfg.n_hidden, "RBM", rng=init), train_x, tcfg).model
        else:
            model = train(masked_model(n, edges, cfg.n_hidden, init if cfg.n_hidden else None), train_x, tcfg).model
        d = hamming_eval(test_x, model, h.get("n_gen"), np.random.default_rng([cfg.seed, 13]),
                         h.get("burn_in", 1000), h.get("thin", 10))
        rec.add(method, train_x.shape[0], 0, "d_ham", d)
    return rec.rows


def run_fid_table(cfg: ExperimentConfig):
    """Returns the per-replicate table and matching records."""
    ns = cfg.n_vars if isinstance(cfg.n_vars, list) else [cfg.n_vars]
    res = simulate_table1(cfg.perturbation_config(), ns, cfg.replicates)
    rec = _Recorder(cfg)
    pc = cfg.perturbation_config()
    for n, r, _, fr in res.rows:
        rec.add(f"n={n}", pc.sample_factor << n, r, "fid_ratio", fr)
    return res, rec.rows


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> list[RunRecord]:
    """Run ``cfg`` and write ``records.csv`` and ``records_summary.json``."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    if cfg.experiment == "fid_table":
        table, rows = run_fid_table(cfg)
        with open(os.path.join(out_dir, "table1.csv"), "w", newline="") as f:
            f.write(table.to_csv())
        with open(os.path.join(out_dir, "table1_summary.json"), "w") as f:
            f.write(table.to_json() + "\n")
    else:
        runner = {"vbm_density": run_vbm_density, "vrbm_density": run_vrbm_density,
                  "real_data": run_real_data}[cfg.experiment]
        rows = runner(cfg)
    write_records(rows, os.path.join(out_dir, "records.csv"))
    return rows


__all__ = [
    "ExperimentConfig", "RunRecord", "empirical_weights", "gen_jeffreys_target", "gibbs_generate",
    "hamming_eval", "load_binary_csv", "min_hamming", "read_records", "records_csv", "run_experiment",
    "run_fid_table", "run_real_data", "run_vbm_density", "run_vrbm_density", "sample_dataset",
    "summarize", "write_records",
]
