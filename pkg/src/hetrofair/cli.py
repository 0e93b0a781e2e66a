"""Command-line entry point: preprocess, train, evaluate, sweep, theory-check.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from . import evaluation as E
from . import theory as T
from .config import ConfigError, RunConfig, hash_files, resolve, run_id, sub_seed, sub_seed_int
from .model import init_params, load_checkpoint, fair_embedding_generation, save_checkpoint
from .train import TrainConfig, TrainingError, fit, format_epoch

log = logging.getLogger("hetrofair")

SPLIT_FILE = "split.tsv"
INTERACTIONS_FILE = "interactions.tsv"
STATS_FILE = "stats.txt"
METRICS_HEADER = ("run_id", "stratum", "metric", "value")
SWEEP_AXES = {"delta": float, "K": int, "d": int}


# ---------------------------------------------------------------- data

def _processed(path: Path) -> bool:
    return path.is_dir() and (path / SPLIT_FILE).exists()


def load_dataset(config: RunConfig):
    """Return (interactions, split, input files) for a raw file or a preprocessed directory."""
    path = Path(config.data)
    if _processed(path):
        rows = list(_read_split_rows(path / SPLIT_FILE))
        interactions = [D.Interaction(u, i) for u, i, _ in rows]
        split = D.split_from_parts(interactions, [p for _, _, p in rows])
        return interactions, split, [path / SPLIT_FILE]
    if not path.exists():
        raise ConfigError(f"data path {path} does not exist")
    interactions = D.load_interactions(path, config.fmt, config.columns)
    interactions = D.k_core_filter(interactions, config.k_core)
    split = D.split(interactions, config.ratios, sub_seed_int(config.seed, "split"))
    return interactions, split, [path]


def _read_split_rows(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise D.DataError(f"{path}:{lineno}: expected user, item, part")
            yield row[0], row[1], row[2]


def dataset_stats(interactions, split: D.DatasetSplit, has_labels: bool) -> dict:
    graph = D.build_graph(interactions)
    stats = {
        "users": graph.num_users,
        "items": graph.num_items,
        "interactions": graph.num_edges,
        "density": graph.density,
        "density_percent": round(100 * graph.density, 3),
    }
    homophily = "N/A"
    if has_labels:
        labels = D.item_labels(graph, interactions)
        try:
            homophily = round(D.homophily_score(graph, labels), 6)
        except D.DataError:
            pass
    stats["homophily"] = homophily
    stats["train"] = sum(len(s) for s in split.train_items)
    stats["valid"] = sum(len(s) for s in split.valid_items)
    stats["test"] = sum(len(s) for s in split.test_items)
    return stats


def write_kv(path: Path, mapping: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in mapping.items()), encoding="utf-8")


def read_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#") and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def cmd_preprocess(config: RunConfig) -> dict:
    config.validate(need_delta=False)
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    interactions = D.load_interactions(config.data, config.fmt, config.columns)
    interactions = D.k_core_filter(interactions, config.k_core)
    split = D.split(interactions, config.ratios, sub_seed_int(config.seed, "split"))
    D.write_interactions(interactions, out / INTERACTIONS_FILE, "tsv", config.columns)

    graph = split.train_graph
    code = {}
    for u in range(split.num_users):
        for p, sets in (("train", split.train_items), ("valid", split.valid_items), ("test", split.test_items)):
            for i in sets[u]:
                code[(u, i)] = p
    uidx = {uid: n for n, uid in enumerate(graph.user_ids)}
    iidx = {iid: n for n, iid in enumerate(graph.item_ids)}
    with open(out / SPLIT_FILE, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for x in interactions:
            w.writerow([x.user_id, x.item_id, code[(uidx[x.user_id], iidx[x.item_id])]])

    has_labels = "label" in config.columns.split(",")
    stats = dataset_stats(interactions, split, has_labels)
    stats.update({"k_core": config.k_core, "seed": config.seed,
                  "ratios": ",".join(repr(float(r)) for r in config.ratios)})
    write_kv(out / STATS_FILE, stats)
    return stats


# ---------------------------------------------------------------- train / evaluate

def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def cmd_train(config: RunConfig) -> dict:
    config.validate()
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    interactions, split, inputs = load_dataset(config)
    input_hash = hash_files(inputs)
    rid = run_id(config, input_hash)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")

    graph = split.train_graph
    params = init_params(
        graph.num_nodes, config.d, config.K, mode=config.mode, delta=config.effective_delta,
        norm_exponent=config.norm_exponent, init=config.init, w_init=config.w_init,
        seed=sub_seed(config.seed, "init"),
    )
    tc = TrainConfig(
        learning_rate=config.learning_rate, reg_beta=config.reg_beta, batch_size=config.batch_size,
        max_epochs=config.max_epochs, patience=config.patience, seed=config.seed,
        eval_every=config.eval_every, optimizer=config.optimizer, n=config.N,
    )
    ckpt = out / "checkpoint.hfr"
    log_lines = []

    def on_epoch(entry):
        log_lines.append(format_epoch(entry))

    best, history = fit(
        graph, split, params, tc,
        rng=np.random.default_rng(sub_seed(config.seed, "sampling")),
        on_epoch=on_epoch,
        on_best=lambda p, _: save_checkpoint(ckpt, p),
    )
    if not ckpt.exists():
        save_checkpoint(ckpt, best)
    (out / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    evaluated = [h for h in history if not math.isnan(h["val_ndcg"])]
    best_entry = max(evaluated, key=lambda h: h["val_ndcg"]) if evaluated else history[-1]
    rows = [
        (rid, "valid", f"ndcg@{config.N}", repr(float(best_entry["val_ndcg"]))),
        (rid, "train", "best_epoch", str(best_entry["epoch"])),
        (rid, "train", "epochs", str(len(history))),
        (rid, "train", "final_loss", repr(float(history[-1]["loss"]))),
    ]
    _write_metrics(out / "train_metrics.csv", rows)
    record = {
        "run_id": rid,
        "config": config.to_text(),
        "input_hash": input_hash,
        "metrics": {"val_ndcg": best_entry["val_ndcg"], "best_epoch": best_entry["epoch"],
                    "epochs": len(history)},
        "timings": {"wall_seconds": round(time.time() - started, 3),
                    "epoch_ms": [h["elapsed_ms"] for h in history]},
    }
    (out / "run.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return record


def cmd_evaluate(config: RunConfig, checkpoint: str | Path | None = None, stratified: bool = False) -> dict:
    config.validate(need_data=True)
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(checkpoint) if checkpoint else out / "checkpoint.hfr"
    interactions, split, inputs = load_dataset(config)
    params = load_checkpoint(checkpoint)
    graph = split.train_graph
    if params.X.shape[0] != graph.num_nodes:
        raise ConfigError(
            f"checkpoint has {params.X.shape[0]} node rows but the dataset has {graph.num_nodes} nodes")
    rid = run_id(config, hash_files(inputs))
    Z, _ = fair_embedding_generation(graph, params)
    reports = [E.evaluate(Z, split, config.N)]
    if stratified:
        reports.extend(r for r in E.stratified_eval(Z, split, config.fraction, config.N) if r is not None)
    rows = []
    for r in reports:
        (out / f"report_{r.stratum}.txt").write_text(r.to_text(), encoding="utf-8")
        rows.extend(r.records(rid))
    _write_metrics(out / "metrics.csv", rows)
    return {r.stratum: r for r in reports}


def cmd_sweep(config: RunConfig, axis: str, values, stratified: bool = False) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    root = Path(config.output)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        v = SWEEP_AXES[axis](v)
        child = config.replace(**{axis: v, "output": str(root / f"{axis}={v}")})
        row = {"value": v}
        try:
            cmd_train(child)
            report = cmd_evaluate(child, stratified=stratified)["all"]
            row.update(report.metrics())
        except Exception as exc:  # a failed child run is recorded, the sweep goes on
            log.error("sweep %s=%s failed: %s", axis, v, exc)
            row.update({m: float("nan") for m in E.METRICS})
            row["error"] = str(exc)
        rows.append(row)
    with open(root / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("value",) + E.METRICS)
        for r in rows:
            w.writerow([r["value"]] + [repr(float(r[m])) for m in E.METRICS])
    return rows


# ---------------------------------------------------------------- theory

DEFAULT_KS = (1, 10, 50, 100, 200, 500)


def theory_battery(seed: int = 0, graphs: int = 20):
    """Named graph battery: random connected graphs, random trees and
    degree-distinct bipartite graphs."""
    rng = np.random.default_rng(seed)
    battery = [("two_node", T.LoopedGraph(np.array([[0.0, 1.0], [1.0, 0.0]])))]
    for n in range(graphs):
        battery.append((f"random_{n}", T.random_connected_graph(int(rng.integers(2, 21)), 0.25, rng)))
    battery.append(("tree_10", T.random_tree(10, rng)))
    for n in range(graphs):
        battery.append((f"bipartite_{n}", T.random_degree_distinct_bipartite(rng)))
    return battery


def cmd_theory(out: str | Path, ks=DEFAULT_KS, seed: int = 0, graphs: int = 20, tol: float = 1e-6,
               graph_list=None) -> list[dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError("k values must be >= 1")
    kmax = ks[-1]
    results = []
    for name, g in graph_list or theory_battery(seed, graphs):
        trace = T.verify_convergence(g, kmax, tol, ks)
        with open(out / f"errors_{name}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("k", "max_abs_error"))
            for k in ks:
                w.writerow((k, repr(trace.errors[k])))
        results.append({"graph": name, "check": "convergence", "k": kmax,
                        "value": trace.max_abs_error, "passed": trace.passed})
        if name.startswith("bipartite"):
            rep = T.verify_degree_ordering(g, kmax, seed=seed)
            for check, v in rep.values.items():
                results.append({"graph": name, "check": check, "k": kmax, "value": v,
                                "passed": (not math.isnan(v)) and v >= 1.0 - 1e-12})
    with open(out / "theory_summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("graph", "check", "k", "value", "status"))
        for r in results:
            w.writerow((r["graph"], r["check"], r["k"], repr(r["value"]), "pass" if r["passed"] else "fail"))
    return results


# ---------------------------------------------------------------- argparse

def _add_run_args(p: argparse.ArgumentParser, data_required: bool = False) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--preset", choices=("lightgcn", "hetrofair", "fair_attention"),
                   help="hyper-parameter preset (lowest precedence)")
    p.add_argument("--data", help="raw interaction file or preprocessed directory")
    p.add_argument("--fmt", choices=("csv", "tsv"))
    p.add_argument("--columns", help="column order, e.g. user,item,label")
    p.add_argument("--k-core", dest="k_core", type=int)
    p.add_argument("--ratios", help="train,valid,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("lightgcn", "fair_attention", "hetrofair"))
    p.add_argument("--K", dest="K", type=int, help="propagation layers (default 4)")
    p.add_argument("--d", dest="d", type=int, help="embedding dimension (default 128)")
    p.add_argument("--delta", type=float, help="attention scale in (0, 1]; required unless lightgcn")
    p.add_argument("--lr", dest="learning_rate", type=float, help="learning rate (default 5e-4)")
    p.add_argument("--reg-beta", dest="reg_beta", type=float, help="L2 coefficient (default 1e-4)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--N", dest="N", type=int, help="ranking cutoff (default 20)")
    p.add_argument("--init", choices=("xavier", "zeros", "normal"), help="embedding init")
    p.add_argument("--w-init", dest="w_init", choices=("xavier", "zeros", "normal"), help="layer weight init")
    p.add_argument("--norm-exponent", dest="norm_exponent", type=float)
    p.add_argument("--fraction", type=float, help="short-head fraction (default 0.2)")
    p.add_argument("--output", "-o", help="output directory")
    p.add_argument("--threads", type=int)


_RUN_KEYS = ("data", "fmt", "columns", "k_core", "ratios", "seed", "mode", "K", "d", "delta",
             "learning_rate", "reg_beta", "batch_size", "max_epochs", "patience", "eval_every",
             "optimizer", "N", "init", "w_init", "norm_exponent", "fraction", "output", "threads")


def _config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _RUN_KEYS}
    if overrides.get("ratios") is not None:
        try:
            overrides["ratios"] = tuple(float(x) for x in overrides["ratios"].split(","))
        except ValueError:
            raise ConfigError(f"bad ratios {overrides['ratios']!r}") from None
    return resolve(overrides, args.config, args.preset)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetrofair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="load, dedupe, k-core filter, split; write stats")
    _add_run_args(p)

    p = sub.add_parser("train", help="train a model and write checkpoint, log and run record")
    _add_run_args(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _add_run_args(p)
    p.add_argument("--checkpoint", help="checkpoint file (default <output>/checkpoint.hfr)")
    p.add_argument("--stratified", action="store_true", help="also write long-tail/short-head reports")

    p = sub.add_parser("sweep", help="train+evaluate once per value of one hyper-parameter")
    _add_run_args(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma list, or start:stop:step (inclusive)")
    p.add_argument("--stratified", action="store_true")

    p = sub.add_parser("theory-check", help="numerical convergence and degree-ordering checks")
    p.add_argument("--k", default=",".join(map(str, DEFAULT_KS)), help="comma list of powers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graphs", type=int, default=20, help="random graphs per family")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--output", "-o", default="runs/theory")
    p.add_argument("--family", choices=("battery", "path"), default="battery",
                   help="'path' checks a slow-mixing 20-node path only")
    return parser


def parse_values(text: str) -> list[float]:
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + n * step, 10) for n in range(count)]
    return [float(x) for x in text.split(",") if x.strip()]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "theory-check":
            ks = [int(k) for k in args.k.split(",") if k.strip()]
            graphs = [("path_20", T.path_graph(20))] if args.family == "path" else None
            with threadpool_limits(1):
                results = cmd_theory(args.output, ks, args.seed, args.graphs, args.tol, graphs)
            for r in results:
                print(f"{r['graph']:<16} {r['check']:<16} k={r['k']:<5} {r['value']:.3e} "
                      f"{'pass' if r['passed'] else 'FAIL'}")
            failed = sum(not r["passed"] for r in results)
            print(f"{len(results) - failed}/{len(results)} checks passed")
            return 0

        config = _config_from_args(args)
        # preprocess has no model; a delta sweep supplies delta per child run
        config.validate(need_delta=args.command not in ("preprocess", "sweep") or
                        (args.command == "sweep" and args.axis != "delta"))
        with threadpool_limits(config.threads):
            if args.command == "preprocess":
                stats = cmd_preprocess(config)
                sys.stdout.write("".join(f"{k}={v}\n" for k, v in stats.items()))
            elif args.command == "train":
                record = cmd_train(config)
                print(f"run_id={record['run_id']} best_val_ndcg={record['metrics']['val_ndcg']:.6f} "
                      f"epochs={record['metrics']['epochs']}")
            elif args.command == "evaluate":
                reports = cmd_evaluate(config, args.checkpoint, args.stratified)
                for r in reports.values():
                    sys.stdout.write(r.to_text())
            elif args.command == "sweep":
                rows = cmd_sweep(config, args.axis, parse_values(args.values), args.stratified)
                for r in rows:
                    print(f"{args.axis}={r['value']} " + " ".join(f"{m}={r[m]:.4f}" for m in E.METRICS))
        return 0
    except (ConfigError, D.DataError, E.UndefinedMetric) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
