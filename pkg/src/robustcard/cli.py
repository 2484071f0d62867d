"""Command-line entry point: ``robustcard <command> [flags]``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 training error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, parse_ratio
from .encoding import QueryEncoder
from .evaluation import (compare_algorithms, format_table, quantile_report, read_report,
                         write_report)
from .losses import loss_mse
from .models import init_model, load_checkpoint, predict_many, save_checkpoint
from .queries import read_workload, write_workload
from .relational import SchemaError, generate_synthetic_database, load_database, save_database
from .seeds import derive_seed
from .server import EstimateService, serve
from .training import TrainingError, train
from .workload import (WorkloadError, build_skewed_split, generate_workload, group_sizes,
                       partition_workload, simple_rule)

log = logging.getLogger("robustcard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.algorithm:
        over.setdefault("train", {})["algorithm"] = args.algorithm
    if args.arch:
        over["arch"] = args.arch
    if args.ratio:
        over.setdefault("split", {})["ratio"] = parse_ratio(args.ratio)
    return over


def _out(cfg: ExperimentConfig, args, key: str) -> Path:
    return Path(args.out) if args.out else cfg.path(key)


# --------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    db = generate_synthetic_database(cfg.raw["data"], derive_seed(cfg.seed, "data"))
    manifest = save_database(db, _out(cfg, args, "database"))
    for name, t in db.tables.items():
        print(f"{name}: {len(t)} rows, {len(t.attributes)} attributes")
    print(f"{len(db.join_graph)} join pairs; manifest {manifest}")
    return EXIT_OK


def cmd_gen_workload(cfg: ExperimentConfig, args) -> int:
    db = load_database(cfg.manifest)
    w = cfg.raw["workload"]
    queries = generate_workload(db, w["kind"], w["counts"], int(w["per_count"]),
                                derive_seed(cfg.seed, "workload"), table=w.get("table"))
    queries = partition_workload(queries, cfg.raw["group_rule"])
    out = _out(cfg, args, "workload")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_workload(queries, out)
    keys = Counter(q.template for q in queries)
    print(f"wrote {len(queries)} labeled queries to {out}")
    for g, n in group_sizes(queries).items():
        tmpl = next(q.template for q in queries if q.group == g)
        print(f"  group {g} ({tmpl}): {n}")
    log.debug("templates %s", dict(keys))
    return EXIT_OK


def _split(cfg: ExperimentConfig, runs: Path):
    split_dir = runs / "split"
    queries = read_workload(cfg.path("workload"))
    if not queries:
        raise WorkloadError("workload is empty")
    if any(q.group is None for q in queries):
        queries = partition_workload(queries, cfg.raw["group_rule"])
    train_q, test_q = build_skewed_split(queries, cfg.split_spec(derive_seed(cfg.seed, "split")))
    split_dir.mkdir(parents=True, exist_ok=True)
    write_workload(train_q, split_dir / "train.jsonl")
    write_workload(test_q, split_dir / "test.jsonl")
    return train_q, test_q


def cmd_train(cfg: ExperimentConfig, args) -> int:
    runs = _out(cfg, args, "runs")
    db = load_database(cfg.manifest)
    encoder = QueryEncoder(db, int(cfg.raw["chunk_size"]))
    train_q, _ = _split(cfg, runs)
    rng = np.random.default_rng(derive_seed(cfg.seed, "validation"))
    n_val = max(1, int(round(float(cfg.raw["validation_fraction"]) * len(train_q))))
    val_idx = set(rng.choice(len(train_q), size=n_val, replace=False).tolist())
    fit_q = [q for i, q in enumerate(train_q) if i not in val_idx]
    val_q = [q for i, q in enumerate(train_q) if i in val_idx]
    base = cfg.train_config()
    algo, arch = base.algorithm, cfg.arch
    group_keys = sorted({q.group for q in fit_q if q.group is not None})
    run_dir = runs / f"{algo}-{arch}"
    run_dir.mkdir(parents=True, exist_ok=True)
    input_spec = encoder.fixed_width if arch == "mlp" else list(encoder.set_widths)

    results = []
    for point in cfg.grid_points():
        tcfg = cfg.train_config(**point, seed=derive_seed(cfg.seed, "train"))
        name = f"lr{point['lr']:g}-bs{point['batch_size']}-ep{point['epochs']}"
        ckpt, marker = run_dir / f"{name}.pt", run_dir / f"{name}.json"
        key = hashlib.sha256(json.dumps(
            {"train": tcfg.to_json(), "arch": arch, "data": _sha256(run_dir.parent / "split" / "train.jsonl")},
            sort_keys=True).encode()).hexdigest()
        if marker.exists() and ckpt.exists():
            done = json.loads(marker.read_text())
            if done.get("config_sha256") == key and done.get("checkpoint_sha256") == _sha256(ckpt):
                print(f"{name}: already complete, skipping")
                results.append((done["val_mse"], name))
                continue
        model = init_model(arch, input_spec, seed=derive_seed(cfg.seed, "model"),
                           n_groups=len(group_keys) if algo == "dann" else None)
        res = train(model, fit_q, db, tcfg, encoder=encoder)
        preds = predict_many(model, val_q, encoder)
        val_mse = float(loss_mse(torch.as_tensor(np.log(preds)),
                                 torch.as_tensor(np.log([q.cardinality for q in val_q]), dtype=torch.float64)))
        save_checkpoint(model, ckpt, {"chunk_size": encoder.chunk_size, "algorithm": algo,
                                      "train_config": tcfg.to_json(), "group_keys": group_keys})
        with (run_dir / f"{name}.log.jsonl").open("w") as fh:
            for h in res.history:
                fh.write(json.dumps(h) + "\n")
        marker.write_text(json.dumps({
            "config_sha256": key, "checkpoint_sha256": _sha256(ckpt), "val_mse": val_mse,
            "epochs_run": len(res.history), "wall_time": res.wall_time}, indent=1) + "\n")
        print(f"{name}: {len(res.history)} epochs, {res.wall_time:.1f}s, validation mse {val_mse:.4f}")
        results.append((val_mse, name))
    best_mse, best = min(results)
    (run_dir / "best.json").write_text(json.dumps(
        {"point": best, "checkpoint": f"{best}.pt", "val_mse": best_mse}, indent=1) + "\n")
    print(f"best {algo}-{arch}: {best} (validation mse {best_mse:.4f})")
    return EXIT_OK


def _test_grouping(cfg: ExperimentConfig, test_q) -> tuple[dict, list[str]]:
    is_simple = simple_rule(cfg.raw["split"]["simple_def"])
    grouping = {}
    for i, q in enumerate(test_q):
        gs = ["simple" if is_simple(q) else "complex"]
        if q.template:
            gs.append(q.template)
        grouping[i] = gs
    return grouping, ["simple", "complex"]


def _write_comparison(reports, out: Path) -> None:
    if not any(r.algorithm == "erm" for r in reports):
        return
    comp = compare_algorithms(reports)
    (out / "comparison.json").write_text(json.dumps(comp.to_json(), indent=1, sort_keys=True) + "\n")
    table = format_table(comp)
    (out / "comparison.txt").write_text(table)
    print(table, end="")


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    runs, out = cfg.path("runs"), _out(cfg, args, "reports")
    db = load_database(cfg.manifest)
    test_path = runs / "split" / "test.jsonl"
    if not test_path.exists():
        raise FileNotFoundError(f"{test_path} missing; run `train` first")
    test_q = read_workload(test_path)
    grouping, order = _test_grouping(cfg, test_q)
    labels = [q.cardinality for q in test_q]
    split = {k: cfg.raw["split"][k] for k in ("simple_def", "ratio", "test_fraction")}
    split["seed"] = cfg.seed
    reports = []
    for best_file in sorted(runs.glob("*/best.json")):
        algo, arch = best_file.parent.name.rsplit("-", 1)
        if (args.algorithm and algo != args.algorithm) or (args.arch and arch != args.arch):
            continue
        best = json.loads(best_file.read_text())
        model, extra = load_checkpoint(best_file.parent / best["checkpoint"])
        encoder = QueryEncoder(db, int(extra.get("chunk_size", 8)))
        if model.arch != arch:
            raise SchemaError(f"checkpoint arch {model.arch} does not match run {arch}")
        marker = json.loads((best_file.parent / f"{best['point']}.json").read_text())
        preds = predict_many(model, test_q, encoder)
        rep = quantile_report(preds, labels, grouping, algo, arch, split, marker.get("wall_time"), order)
        write_report(rep, out)
        reports.append(rep)
        print(f"{rep.name}: overall 50/95/99% = "
              + "/".join(f"{rep.quantiles['overall'][p]:.2f}" for p in ("50", "95", "99")))
    if not reports:
        raise FileNotFoundError(f"no trained runs under {runs}")
    _write_comparison(reports, out)
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg, args, "reports")
    reports = []
    for path in sorted(out.glob("*.json")):
        if path.name == "comparison.json":
            continue
        old = read_report(path)
        rep = quantile_report(old.predictions, old.labels, old.groups, old.algorithm, old.arch,
                              old.split, old.wall_time, [g for g in old.quantiles if g != "overall"])
        write_report(rep, out)
        reports.append(rep)
    if not reports:
        raise FileNotFoundError(f"no report files under {out}")
    _write_comparison(reports, out)
    return EXIT_OK


def cmd_serve(cfg: ExperimentConfig, args) -> int:
    if not args.checkpoint:
        raise UsageError("serve needs --checkpoint")
    manifest = Path(args.db) if args.db else cfg.manifest
    service = EstimateService.from_files(args.checkpoint, manifest)
    serve(service, args.host, args.port, args.workers, announce=lambda s: print(s, flush=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-workload": cmd_gen_workload,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustcard", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment config JSON (default: $ROBUSTCARD_CONFIG)")
    p.add_argument("--seed", type=int)
    p.add_argument("--algorithm", choices=["erm", "coral", "dann", "dro", "orderemb", "mixup", "masking"])
    p.add_argument("--arch", choices=["mlp", "mscn"])
    p.add_argument("--ratio", help="simple/complex training mix, e.g. 20/80")
    p.add_argument("--out", help="output location of the command")
    p.add_argument("--checkpoint", help="serve: model checkpoint")
    p.add_argument("--db", help="serve: database manifest (default from config)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, RuntimeError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (SchemaError, WorkloadError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
