"""Command-line entry point.

Every subcommand reads a JSON config (``--config``); ``--seed`` and ``--out``
override the config.  Exit status: 0 ok, 2 bad config or input, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .boltzmann import BmModel, TrainConfig, train
from .errors import CifError, ConfigError, ParseError
from .harness import ExperimentConfig, hamming_eval, load_binary_csv, run_experiment
from .selection import CvConfig, EdgeSet, HtestConfig, cv_select, htest_csv, masked_model

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

EXPERIMENT_COMMANDS = {"fid-table": "fid_table", "vbm-density": "vbm_density", "vrbm-density": "vrbm_density"}


def _load_config(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _take(cfg: dict, allowed: set, required=()) -> dict:
    extra = set(cfg) - allowed
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ConfigError(f"missing config keys {missing}")
    return cfg


def _train_config(d: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(**{"seed": seed, **d})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _out_dir(args, cfg: dict) -> str:
    out = args.out or cfg.get("output_dir") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write(out: str, name: str, text: str) -> None:
    with open(os.path.join(out, name), "w", newline="") as f:
        f.write(text)


def cmd_experiment(args, raw: dict) -> int:
    raw = dict(raw)
    raw.setdefault("experiment", EXPERIMENT_COMMANDS[args.command])
    if raw["experiment"] != EXPERIMENT_COMMANDS[args.command]:
        raise ConfigError(f"config is for {raw['experiment']!r}, not {args.command}")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["output_dir"] = args.out
    cfg = ExperimentConfig.from_dict(raw)
    run_experiment(cfg, _out_dir(args, raw))
    return EXIT_OK


def cmd_select(args, raw: dict) -> int:
    c = _take(raw, {"data", "method", "alpha", "smoothing", "k", "grid", "n_hidden", "train_cfg",
                    "seed", "output_dir"}, ("data",))
    seed = args.seed if args.seed is not None else int(c.get("seed", 0))
    x = load_binary_csv(c["data"])
    out = _out_dir(args, c)
    method = c.get("method", "cif_htest")
    try:
        hcfg = HtestConfig(alpha=c.get("alpha", 0.05), smoothing=c.get("smoothing", 0.5))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if method == "cif_htest":
        _write(out, "edges.csv", htest_csv(x, hcfg))
        return EXIT_OK
    if method not in ("cif_cv", "rand_cv"):
        raise ConfigError(f"unknown selection method {method!r}")
    try:
        cv = CvConfig(k=c.get("k", 5), grid=tuple(c["grid"]) if c.get("grid") else None, seed=seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    res = cv_select(x, method.split("_")[0], cv, _train_config(c.get("train_cfg", {}), seed),
                    n_h=int(c.get("n_hidden", 0)))
    _write(out, "cv_table.csv", res.table_csv())
    lines = ["i,j,rank,selected"]
    for r, (i, j) in enumerate(res.order):
        lines.append(f"{i},{j},{r},{int((i, j) in res.edges)}")
    _write(out, "edges.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_train(args, raw: dict) -> int:
    c = _take(raw, {"data", "kind", "n_hidden", "edges", "train_cfg", "seed", "output_dir"}, ("data",))
    seed = args.seed if args.seed is not None else int(c.get("seed", 0))
    x = load_binary_csv(c["data"])
    n, n_h = x.shape[1], int(c.get("n_hidden", 0))
    kind = c.get("kind", "VBM" if n_h == 0 else "vRBM")
    rng = np.random.default_rng([seed, 7])
    try:
        if "edges" in c:
            if kind not in ("VBM", "vRBM"):
                raise ConfigError("an edge list applies to VBM or vRBM models")
            model = masked_model(n, EdgeSet(n, frozenset(map(tuple, c["edges"]))), n_h, rng if n_h else None)
        else:
            model = BmModel.create(n, n_h, kind, rng=rng if n_h else None)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    res = train(model, x, _train_config(c.get("train_cfg", {}), seed))
    out = _out_dir(args, c)
    _write(out, "model.json", res.model.to_json() + "\n")
    _write(out, "trace.csv", res.trace_csv())
    tcfg = _train_config(c.get("train_cfg", {}), seed)
    if tcfg.method == "exact_ml" and not res.converged:
        print(f"training stopped at gradient max-norm {res.grad_norm:.3g} (tol {tcfg.tol:g})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval_hamming(args, raw: dict) -> int:
    c = _take(raw, {"data", "model", "n_gen", "burn_in", "thin", "seed", "output_dir"}, ("data", "model"))
    seed = args.seed if args.seed is not None else int(c.get("seed", 0))
    x = load_binary_csv(c["data"])
    try:
        with open(c["model"]) as f:
            model = BmModel.from_json(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read model {c['model']}: {e}") from e
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad model file: {e}") from e
    if model.n_x != x.shape[1]:
        raise ConfigError(f"model has {model.n_x} visible units, data has {x.shape[1]} columns")
    d = hamming_eval(x, model, c.get("n_gen"), np.random.default_rng(seed),
                     int(c.get("burn_in", 1000)), int(c.get("thin", 10)))
    out = _out_dir(args, c)
    _write(out, "hamming.json", json.dumps({"d_ham": d, "rows": int(x.shape[0])}, sort_keys=True) + "\n")
    print(repr(d))
    return EXIT_OK


COMMANDS = {
    "fid-table": cmd_experiment,
    "vbm-density": cmd_experiment,
    "vrbm-density": cmd_experiment,
    "select": cmd_select,
    "train": cmd_train,
    "eval-hamming": cmd_eval_hamming,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cifbm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = _load_config(args.config)
        return COMMANDS[args.command](args, raw)
    except (ConfigError, ParseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CifError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
