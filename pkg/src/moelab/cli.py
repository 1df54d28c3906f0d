"""Command-line experiment runner.

Every subcommand resolves a flat configuration (defaults, then ``--config``
file, then flags), runs, and prints a JSON report::

    {"command", "version", "seed", "config", "wall_time_s", "payload"}

The payload is a pure function of the config; feeding a report back through
``--config`` replays the run. Exit codes: 0 ok, 2 usage, 3 input data,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from moelab import __version__, losses, synthetic, theory
from moelab.gating import (
    TokenFileError,
    ZeroNormTokenError,
    affinity_scores,
    gate_probabilities,
    grap_weights,
    load_tokens,
)
from moelab.routing import route_ecr, route_hybrid, route_tcr
from moelab.rng import substream
from moelab.training import RouterMode, TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _capacity(text) -> int:
    v = float(text)
    if not math.isfinite(v) or v != int(v):
        raise argparse.ArgumentTypeError(f"capacity must be a whole number, got {text!r}")
    return int(v)


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    text = str(text).strip()
    return [float(v) for v in text.split(",")] if text else []


def _int_list(text) -> list[int]:
    return [_capacity(v) for v in _float_list(text)]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# (key, type, default, help); keys double as flag names with '_' -> '-'
SIMULATE = [
    ("router", str, "tcr", "tcr or ecr"),
    ("method", str, "exact", "exact, mc or bounds"),
    ("s", int, 256, "tokens per sample"),
    ("n", int, 4, "experts"),
    ("c", _capacity, 16, "expert capacity"),
    ("p", _float_list, [], "true-positive probabilities (one value or n, comma separated)"),
    ("q", _float_list, [], "false-positive probabilities (one value or n)"),
    ("trials", int, 1_000_000, "Monte-Carlo trials"),
    ("workers", int, 1, "threads for Monte-Carlo chunks"),
    ("seed", int, 0, "root seed"),
]

ROUTE = [
    ("input", str, "", "token file (.csv, or .bin/.f32 raw float32 with s,d header)"),
    ("experts", int, 2, "number of experts; must divide the token dimension"),
    ("mode", str, "tcr", "tcr, ecr or hybrid"),
    ("ell", int, 1, "experts per token (tcr)"),
    ("c", _capacity, 0, "expert capacity (tcr/ecr); 0 means s"),
    ("cmax", _capacity, 0, "capacity cap (hybrid); 0 means s"),
    ("theta", float, 0.7, "score-mass threshold (hybrid)"),
    ("noise_std", float, 0.0, "gate noise standard deviation"),
    ("alpha", float, 0.01, "balancing-loss coefficient"),
    ("mu", float, 0.01, "locality-loss coefficient"),
    ("nodes", int, 2, "nodes the experts are spread over"),
    ("seed", int, 0, "root seed"),
]

TRAIN = [
    ("s", int, 64, "tokens per sample"),
    ("d", int, 64, "feature dimension"),
    ("n", int, 4, "experts (and classes)"),
    ("steps", int, 500, "SGD steps"),
    ("batch_size", int, 16, "samples per step"),
    ("learning_rate", float, 5.0, "SGD step size"),
    ("router_learning_rate", float, -1.0, "router step size; negative means learning_rate"),
    ("schedule", str, "0:TCR:64", "mode schedule, e.g. 0:TCR:64,200:ECR:8 or 0:HYBRID:64:0.7"),
    ("alpha", float, 0.01, "balancing-loss coefficient"),
    ("mu", float, 0.0, "locality-loss coefficient"),
    ("capacity_policy", str, "fixed", "fixed or adaptive"),
    ("adaptive_theta", float, 0.7, "hybrid threshold for the adaptive policy"),
    ("ema_alpha", float, 0.5, "EMA weight of the adaptive policy"),
    ("learn_router", _bool, True, "update router weights"),
    ("noise_kind", str, "clustered", "isotropic or clustered"),
    ("concentration", float, 10.0, "cluster concentration"),
    ("pattern_alignment", float, 0.5, "cosine of patterns with their expert row"),
    ("center_alignment", float, 0.7, "cosine of cluster centers with their expert row"),
    ("init_scale", float, 0.01, "expert weight init scale"),
    ("q_trials", int, 4096, "noise draws for the false-positive estimate"),
    ("nodes", int, 2, "nodes for the locality loss"),
    ("switch_c_star", float, -1.0, "switch to ECR(ceil(2C*)) once s*q_i <= C*; negative disables"),
    ("seed", int, 0, "root seed"),
]

FEATURES = [
    ("kind", str, "isotropic", "isotropic or clustered"),
    ("s", int, 256, "tokens"),
    ("d", int, 512, "feature dimension"),
    ("n", int, 4, "clusters / experts"),
    ("concentration", float, 10.0, "cluster concentration"),
    ("seed", int, 0, "root seed"),
]

BENCH = [
    ("s_grid", _int_list, [1024, 4096], "token counts"),
    ("n_grid", _int_list, [4, 8], "expert counts"),
    ("c_grid", _int_list, [64, 256], "capacities"),
    ("k", int, 5, "repetitions per cell (median reported)"),
    ("theta", float, 0.7, "hybrid threshold"),
    ("seed", int, 0, "root seed"),
]

SCHEMAS = {"simulate": SIMULATE, "route": ROUTE, "train": TRAIN, "features": FEATURES, "bench": BENCH}


# -- config -----------------------------------------------------------------


def _coerce(schema, key, value):
    for k, typ, _, _ in schema:
        if k == key:
            try:
                return typ(value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for {key}: {value!r} ({exc})") from None
    raise UsageError(f"unknown config key {key!r}")


def load_config_file(path, command: str) -> dict:
    """Read a flat JSON config, or the ``config`` of a previous run report."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    if "payload" in data and "config" in data:
        if data.get("command") not in (None, command):
            raise UsageError(f"report is for {data['command']!r}, not {command!r}")
        data = data["config"]
    schema = SCHEMAS[command]
    return {k: _coerce(schema, k, v) for k, v in data.items()}


def resolve_config(command: str, file_cfg: dict, flags: dict) -> dict:
    cfg = {k: default for k, _, default, _ in SCHEMAS[command]}
    cfg.update(file_cfg)
    cfg.update(flags)
    return cfg


# -- commands ---------------------------------------------------------------


def run_simulate(cfg: dict) -> dict:
    router, method = cfg["router"], cfg["method"]
    if router not in ("tcr", "ecr"):
        raise UsageError(f"router must be tcr or ecr, got {router!r}")
    if method not in ("exact", "mc", "bounds"):
        raise UsageError(f"method must be exact, mc or bounds, got {method!r}")
    if cfg["workers"] < 1:
        raise UsageError("workers must be >= 1")
    try:
        spec = theory.SimSpec(
            s=cfg["s"], n=cfg["n"], C=cfg["c"], p=tuple(cfg["p"]), q=tuple(cfg["q"]),
            trials=cfg["trials"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    exact_fn = theory.tcr_success_exact if router == "tcr" else theory.ecr_success_exact
    bounds = theory.theorem_bounds(spec)
    payload = {"router": router, "method": method, "spec": spec.to_dict(), "bounds": bounds.to_dict()}
    payload["validity_flags"] = {k: v for k, v in bounds.to_dict().items() if k.endswith("_valid")}
    if method == "exact":
        payload["exact"] = exact_fn(spec)
    elif method == "mc":
        mc_fn = theory.tcr_success_mc if router == "tcr" else theory.ecr_success_mc
        est = mc_fn(spec, workers=cfg["workers"])
        payload.update(estimate=est.estimate, std_error=est.std_error, successes=est.successes, exact=est.exact)
    return payload


def _route_plan(scores, cfg):
    s = scores.shape[0]
    mode = cfg["mode"]
    if mode == "tcr":
        return route_tcr(scores, cfg["ell"], cfg["c"] or s)
    if mode == "ecr":
        return route_ecr(scores, cfg["c"] or s)
    if mode == "hybrid":
        return route_hybrid(scores, cfg["cmax"] or s, cfg["theta"])
    raise UsageError(f"mode must be tcr, ecr or hybrid, got {mode!r}")


def run_route(cfg: dict) -> dict:
    if not cfg["input"]:
        raise UsageError("route needs --input")
    path = Path(cfg["input"])
    if not path.exists():
        raise InputError(f"token file {path} not found")
    try:
        batch = load_tokens(path)
    except TokenFileError as exc:
        raise InputError(str(exc)) from None
    n = cfg["experts"]
    try:
        gw = grap_weights(batch.d, n)
    except ValueError as exc:
        raise UsageError(f"experts={n} incompatible with token dimension {batch.d}: {exc}") from None
    try:
        scores = affinity_scores(batch, gw)
    except ZeroNormTokenError as exc:
        raise InputError(str(exc)) from None
    try:
        plan = _route_plan(scores, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    gates = gate_probabilities(scores, cfg["noise_std"], cfg["seed"])
    stats = losses.load_stats(gates, plan)
    nodes = min(max(cfg["nodes"], 1), n)
    nd = losses.node_distribution(plan, losses.expert_nodes(n, nodes))
    return {
        "plan": plan.to_dict(),
        "tokens": batch.s,
        "dim": batch.d,
        "experts": n,
        "load": {"f": stats.f.tolist(), "P": stats.P.tolist(), "T": stats.T},
        "aux_loss": losses.aux_loss(stats, cfg["alpha"]),
        "loc_loss": losses.locality_loss(nd, cfg["mu"]),
        "node_traffic": nd.current.tolist(),
    }


def _parse_schedule(text: str) -> tuple:
    sched = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) not in (3, 4):
            raise UsageError(f"bad schedule entry {item!r}; expected step:MODE:capacity[:theta]")
        step, kind, cap = int(parts[0]), parts[1].upper(), _capacity(parts[2])
        theta = float(parts[3]) if len(parts) == 4 else 0.7
        sched.append((step, RouterMode(kind, cap, theta)))
    return tuple(sched)


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            s=cfg["s"], d=cfg["d"], n=cfg["n"], steps=cfg["steps"], batch_size=cfg["batch_size"],
            learning_rate=cfg["learning_rate"],
            router_learning_rate=None if cfg["router_learning_rate"] < 0 else cfg["router_learning_rate"],
            seed=cfg["seed"], mode_schedule=_parse_schedule(cfg["schedule"]), alpha=cfg["alpha"], mu=cfg["mu"],
            capacity_policy=cfg["capacity_policy"], adaptive_theta=cfg["adaptive_theta"],
            ema_alpha=cfg["ema_alpha"], learn_router=cfg["learn_router"], noise_kind=cfg["noise_kind"],
            concentration=cfg["concentration"], pattern_alignment=cfg["pattern_alignment"],
            center_alignment=cfg["center_alignment"], init_scale=cfg["init_scale"], q_trials=cfg["q_trials"],
            nodes=cfg["nodes"], switch_c_star=None if cfg["switch_c_star"] < 0 else cfg["switch_c_star"],
        )
    except ValueError as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def run_train(cfg: dict, metrics_path: Path | None = None) -> dict:
    tc = train_config(cfg)
    try:
        log, _ = train(tc)
    except TrainingDiverged as exc:
        raise Diverged(exc.step, exc.record) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    metrics_path = metrics_path or Path("metrics.csv")
    log.to_csv(metrics_path)
    last = log.records[-1]
    return {
        "steps": len(log.records),
        "final_dispatch_success": last["dispatch_success"],
        "final": {k: last[k] for k in ("task_loss", "aux_loss", "loc_loss", "capacity", "mode", "q_hat_max")},
        "initial_param_hash": log.initial_hash,
        "final_param_hash": log.final_hash,
        "params_unchanged": log.initial_hash == log.final_hash,
        "metrics_sha256": hashlib.sha256(metrics_path.read_bytes()).hexdigest(),
    }


class Diverged(Exception):
    def __init__(self, step, record):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.record = record


def run_features(cfg: dict, csv_path: Path | None = None) -> dict:
    kind = cfg["kind"]
    try:
        if kind == "isotropic":
            batch = synthetic.sample_isotropic(cfg["s"], cfg["d"], cfg["seed"])
        elif kind == "clustered":
            batch = synthetic.sample_clustered(cfg["s"], cfg["d"], cfg["n"], cfg["concentration"], cfg["seed"])
        else:
            raise UsageError(f"kind must be isotropic or clustered, got {kind!r}")
        corr = synthetic.correlation_matrix(batch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    off = ~np.eye(corr.shape[0], dtype=bool)
    payload = {
        "kind": kind,
        "tokens": batch.s,
        "mean_abs_offdiag": float(np.abs(corr[off]).mean()),
        "mean_offdiag": float(corr[off].mean()),
    }
    if kind == "clustered":
        g = synthetic.cluster_of(batch.s, cfg["n"])
        same = (g[:, None] == g[None, :]) & off
        payload["mean_within_cluster"] = float(corr[same].mean()) if same.any() else None
    if csv_path is not None:
        np.savetxt(csv_path, corr, delimiter=",", fmt="%.17g")
        payload["csv_sha256"] = hashlib.sha256(Path(csv_path).read_bytes()).hexdigest()
    return payload


def run_bench(cfg: dict) -> tuple[dict, dict]:
    """Deterministic cell facts go in the payload; timings are returned separately."""
    if cfg["k"] < 1:
        raise UsageError("k must be >= 1")
    cells, timings = [], []
    grid = [(s, n, c) for s in cfg["s_grid"] for n in cfg["n_grid"] for c in cfg["c_grid"]]
    for idx, (s, n, c) in enumerate(grid):
        scores = substream(cfg["seed"], idx, 0xBE).uniform(-1.0, 1.0, size=(s, n))
        routers = {
            "tcr": lambda: route_tcr(scores, 1, c),
            "ecr": lambda: route_ecr(scores, c),
            "hybrid": lambda: route_hybrid(scores, c, cfg["theta"]),
        }
        cell = {"s": s, "n": n, "C": c, "k": cfg["k"]}
        tcell = {"s": s, "n": n, "C": c, "k": cfg["k"]}
        for name, fn in routers.items():
            plan = fn()
            cell[name] = {"slots": plan.slots, "dropped": len(plan.dropped)}
            runs = []
            for _ in range(cfg["k"]):
                t0 = time.perf_counter()
                fn()
                runs.append(time.perf_counter() - t0)
            tcell[name] = {"median_s": float(np.median(runs)), "tokens_per_s": s / max(float(np.median(runs)), 1e-12)}
        cells.append(cell)
        timings.append(tcell)
    return {"cells": cells}, {"cells": timings}


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moelab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"moelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "training-success probabilities (exact, Monte-Carlo, bounds)",
        "route": "route a token file and report the plan, load and losses",
        "train": "toy MoE training; writes a metrics CSV",
        "features": "synthetic token features and their correlation matrix",
        "bench": "dispatch throughput over an (s, n, C) grid",
    }
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config or previous run report to replay")
        p.add_argument("--out", help="write the report here instead of stdout")
        for key, typ, default, text in schema:
            if name == "simulate" and key in ("router", "method"):
                continue
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=argparse.SUPPRESS,
                           help=f"{text} (default {default!r})")
        if name == "simulate":
            # choices are checked in run_simulate; argparse would test the suppressed default against them
            p.add_argument("router", nargs="?", default=argparse.SUPPRESS, metavar="{tcr,ecr}")
            group = p.add_mutually_exclusive_group()
            for m in ("exact", "mc", "bounds"):
                group.add_argument("--" + m, dest="method", action="store_const", const=m, default=argparse.SUPPRESS)
        if name == "train":
            p.add_argument("--metrics", help="metrics CSV path (default: next to --out, else metrics.csv)")
        if name == "features":
            p.add_argument("--csv", help="write the correlation matrix here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    meta = {"command", "config", "out", "metrics", "csv"}
    flags = {k: v for k, v in vars(args).items() if k not in meta}
    out = Path(args.out) if args.out else None
    try:
        file_cfg = load_config_file(args.config, command) if args.config else {}
        cfg = resolve_config(command, file_cfg, flags)
        t0 = time.perf_counter()
        extra = {}
        if command == "simulate":
            payload = run_simulate(cfg)
        elif command == "route":
            payload = run_route(cfg)
        elif command == "train":
            metrics = Path(args.metrics) if args.metrics else (out.with_suffix(".csv") if out else None)
            payload = run_train(cfg, metrics)
        elif command == "features":
            payload = run_features(cfg, Path(args.csv) if args.csv else None)
        else:
            payload, extra["measurements"] = run_bench(cfg)
        wall = time.perf_counter() - t0
    except UsageError as exc:
        print(f"moelab {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"moelab {command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Diverged as exc:
        print(f"moelab {command}: {exc}; last metrics: {json.dumps(exc.record)}", file=sys.stderr)
        return EXIT_DIVERGED
    report = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "wall_time_s": wall,
        "payload": payload,
        **extra,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        out.write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
