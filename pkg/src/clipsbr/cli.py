"""Command-line pipeline driver.

Subcommands: synth, preprocess, mine, train, eval, ablate, sweep.
Configuration comes from one JSON file (--config) with every field
overridable by a flag; the effective configuration is hashed and the
hash embedded in each artifact, chained to the upstream artifact hashes,
so eval and train refuse to run against stale inputs.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ._validation import UsageError, check_positive
from .community import leiden, read_partition, write_partition
from .dataset import build_dataset, read_splits, write_splits
from .evaluation import evaluate
from .graph import build_graph, read_edgelist, write_edgelist
from .model import ENCODERS
from .prompt import VARIANTS, SessionPromptIndex
from .synth import generate, write_synth
from .training import (TrainConfig, fit, load_checkpoint, save_checkpoint)
from .utils import file_sha256, stable_hash, read_json, write_json

DEFAULTS: dict = {
    "input": None,
    "out_dir": "run",
    "gap_seconds": 3600,
    "min_session_len": 3,
    "min_user_sessions": 5,
    "valid_frac": 0.1,
    "test_frac": 0.1,
    "resolution": 1.0,
    "seed": 0,
    "encoder": "gru",
    "prompt_variant": "C",
    "batch_size": 128,
    "learning_rate": 0.001,
    "max_epochs": 100,
    "patience": 50,
    "d": 64,
    "ks": [5, 10],
    "split": "test",
    "resolutions": [0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0],
    "num_items": 500,
    "num_clusters": 10,
    "num_users": 200,
    "sessions_per_user": 10,
    "noise": 0.2,
}

_FLAG_KEYS = {
    "input": "input", "out": "out_dir", "gap_seconds": "gap_seconds",
    "min_session_len": "min_session_len", "min_user_sessions": "min_user_sessions",
    "valid_frac": "valid_frac", "test_frac": "test_frac",
    "resolution": "resolution", "seed": "seed", "encoder": "encoder",
    "prompt_variant": "prompt_variant", "batch_size": "batch_size",
    "lr": "learning_rate", "epochs": "max_epochs", "patience": "patience",
    "d": "d", "k": "ks", "split": "split", "resolutions": "resolutions",
    "num_items": "num_items", "num_clusters": "num_clusters",
    "num_users": "num_users", "sessions_per_user": "sessions_per_user",
    "noise": "noise",
}


def _load_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        overrides = read_json(path)
        if not isinstance(overrides, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overrides)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        max_epochs=int(cfg["max_epochs"]),
        patience=int(cfg["patience"]),
        seed=int(cfg["seed"]),
        encoder=cfg["encoder"],
        prompt_variant=cfg["prompt_variant"],
        resolution=float(cfg["resolution"]),
        d=int(cfg["d"]),
    ).validate()


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    rows, truth = generate(
        num_items=int(cfg["num_items"]), num_clusters=int(cfg["num_clusters"]),
        num_users=int(cfg["num_users"]),
        sessions_per_user=int(cfg["sessions_per_user"]),
        noise=float(cfg["noise"]), seed=int(cfg["seed"]))
    data_path, truth_path = write_synth(out, rows, truth)
    print(f"wrote {data_path} ({len(rows)} interactions) and {truth_path}")
    return 0


def cmd_preprocess(cfg: dict) -> int:
    if not cfg["input"]:
        raise UsageError("preprocess needs --input (or config key 'input')")
    input_path = Path(cfg["input"])
    if not input_path.exists():
        raise UsageError(f"input file not found: {input_path}")
    out = _out_dir(cfg)
    dataset = build_dataset(
        input_path,
        gap_seconds=int(cfg["gap_seconds"]),
        min_session_len=int(cfg["min_session_len"]),
        min_user_sessions=int(cfg["min_user_sessions"]),
        valid_frac=float(cfg["valid_frac"]),
        test_frac=float(cfg["test_frac"]),
    )
    config_hash = stable_hash({
        "cmd": "preprocess",
        "input_sha": file_sha256(input_path),
        "gap_seconds": int(cfg["gap_seconds"]),
        "min_session_len": int(cfg["min_session_len"]),
        "min_user_sessions": int(cfg["min_user_sessions"]),
        "valid_frac": float(cfg["valid_frac"]),
        "test_frac": float(cfg["test_frac"]),
    })
    manifest = write_splits(dataset, out, config_hash=config_hash)
    counts = manifest["counts"]
    print(f"items={manifest['num_items']} (train {manifest['num_train_items']}) "
          f"users={manifest['num_users']}")
    for name in ("train", "valid", "test"):
        print(f"{name}: {counts[name]['sessions']} sessions, "
              f"{counts[name]['instances']} instances")
    return 0


def cmd_mine(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset = read_splits(out)
    if not dataset.train:
        raise UsageError("training split is empty; nothing to mine")
    check_positive("resolution", float(cfg["resolution"]))
    graph = build_graph(dataset.train, dataset.num_train_items)
    result = leiden(graph, resolution=float(cfg["resolution"]), seed=int(cfg["seed"]))
    manifest_hash = file_sha256(out / "manifest.json")
    config_hash = stable_hash({
        "cmd": "mine", "manifest": manifest_hash,
        "resolution": float(cfg["resolution"]), "seed": int(cfg["seed"]),
    })
    write_edgelist(graph, out / "graph.edges")
    write_partition(out / "partition.json", result, config_hash=config_hash,
                    extra={"manifest_hash": manifest_hash})
    print(f"clusters={result.num_clusters} quality={result.quality:.6f}")
    return 0


def _load_artifacts(out: Path):
    dataset = read_splits(out)
    partition = read_partition(out / "partition.json")
    manifest_hash = file_sha256(out / "manifest.json")
    if partition.get("manifest_hash") != manifest_hash:
        raise UsageError("partition.json is stale: re-run mine after preprocess")
    if len(partition["assignment"]) != dataset.num_train_items:
        raise UsageError("partition does not cover the training items; re-run mine")
    graph = read_edgelist(out / "graph.edges")
    if graph.num_nodes != dataset.num_train_items:
        raise UsageError("graph.edges is stale: re-run mine after preprocess")
    return dataset, partition, graph, manifest_hash


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset, partition, graph, manifest_hash = _load_artifacts(out)
    cfg = dict(cfg, resolution=partition["resolution"])
    config = _train_config(cfg)
    partition_hash = file_sha256(out / "partition.json")
    config_hash = stable_hash({
        "cmd": "train", "manifest": manifest_hash, "partition": partition_hash,
        "train": config.to_dict(),
    })
    result = fit(dataset, config, partition["assignment"], graph=graph,
                 log_path=out / "train_log.jsonl")
    session_index = SessionPromptIndex(dataset.train)
    meta = {
        "config": config.to_dict(),
        "config_hash": config_hash,
        "manifest_hash": manifest_hash,
        "partition_hash": partition_hash,
        "epoch": result.epoch,
        "metrics": result.metrics,
        "stopped": result.stopped,
        "dims": {
            "num_items": dataset.num_items,
            "num_train_items": dataset.num_train_items,
            "num_users": dataset.num_users,
            "num_clusters": partition["num_clusters"],
            "num_session_slots": session_index.num_slots,
        },
    }
    save_checkpoint(out / "checkpoint.bin", result.params, result.adam, meta)
    print(f"best epoch {result.epoch}: valid MRR@5={result.metrics['valid_mrr5']:.4f} "
          f"Recall@5={result.metrics['valid_recall5']:.4f} ({result.stopped})")
    return 0


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset, partition, graph, manifest_hash = _load_artifacts(out)
    params, _, header = load_checkpoint(out / "checkpoint.bin")
    if header.get("manifest_hash") != manifest_hash:
        raise UsageError("checkpoint is stale: re-run train after preprocess")
    if header.get("partition_hash") != file_sha256(out / "partition.json"):
        raise UsageError("checkpoint is stale: re-run train after mine")
    split = cfg["split"]
    ks = sorted(int(k) for k in cfg["ks"])
    config = header["config"]
    config_hash = stable_hash({
        "cmd": "eval", "checkpoint": header["config_hash"], "split": split, "ks": ks,
    })
    report = evaluate(
        params, config["encoder"], config["prompt_variant"], dataset, split,
        partition["assignment"], graph, ks=ks,
        session_index=SessionPromptIndex(dataset.train), config_hash=config_hash)
    persisted = {k: v for k, v in report.items() if k != "ranks"}
    write_json(out / f"report_{split}.json", persisted)
    print(f"split={split} n_instances={report['n_instances']}")
    print(f"{'k':>4}  {'mrr':>8}  {'recall':>8}")
    for k in ks:
        m = report["metrics"][str(k)]
        print(f"{k:>4}  {m['mrr']:>8.4f}  {m['recall']:>8.4f}")
    return 0


def _train_and_test(dataset, graph, assignment, config: TrainConfig,
                    split: str, ks: list[int]) -> dict:
    result = fit(dataset, config, assignment, graph=graph)
    session_index = SessionPromptIndex(dataset.train)
    report = evaluate(
        result.params, config.encoder, config.prompt_variant, dataset, split,
        assignment, graph, ks=ks, session_index=session_index)
    return {"metrics": report["metrics"], "epoch": result.epoch,
            "valid_mrr5": result.metrics["valid_mrr5"]}


def _relative_gain(value: float, base: float) -> float | None:
    if base <= 0:
        return None
    return 100.0 * (value - base) / base


def cmd_ablate(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset, partition, graph, manifest_hash = _load_artifacts(out)
    cfg = dict(cfg, resolution=partition["resolution"])
    split = cfg["split"]
    rows = []
    for variant in VARIANTS:
        config = _train_config(dict(cfg, prompt_variant=variant))
        run = _train_and_test(dataset, graph, partition["assignment"], config,
                              split, ks=[5])
        m = run["metrics"]["5"]
        rows.append({"variant": variant, "mrr5": m["mrr"], "recall5": m["recall"]})
    base = rows[0]
    assert base["variant"] == "none"
    for row in rows:
        gain_m = _relative_gain(row["mrr5"], base["mrr5"])
        gain_r = _relative_gain(row["recall5"], base["recall5"])
        row["improv_mrr_pct"] = gain_m
        row["improv_recall_pct"] = gain_r
        row["avg_improv_pct"] = (None if gain_m is None or gain_r is None
                                 else (gain_m + gain_r) / 2.0)
    config_hash = stable_hash({
        "cmd": "ablate", "manifest": manifest_hash,
        "partition": file_sha256(out / "partition.json"),
        "train": _train_config(cfg).to_dict(), "split": split,
    })
    doc = {"split": split, "config_hash": config_hash, "baseline": "none",
           "rows": rows}
    write_json(out / "ablation.json", doc)
    print(f"{'variant':>8}  {'mrr5':>8}  {'recall5':>8}  {'avg improv %':>12}")
    for row in rows:
        avg = row["avg_improv_pct"]
        avg_text = f"{avg:>12.2f}" if avg is not None else f"{'n/a':>12}"
        print(f"{row['variant']:>8}  {row['mrr5']:>8.4f}  {row['recall5']:>8.4f}  {avg_text}")
    return 0


def cmd_sweep(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset = read_splits(out)
    if not dataset.train:
        raise UsageError("training split is empty")
    resolutions = [float(r) for r in cfg["resolutions"]]
    for r in resolutions:
        check_positive("resolution", r)
    graph = build_graph(dataset.train, dataset.num_train_items)
    manifest_hash = file_sha256(out / "manifest.json")
    split = cfg["split"]
    rows = []
    for r in resolutions:
        mined = leiden(graph, resolution=r, seed=int(cfg["seed"]))
        config = _train_config(dict(cfg, resolution=r))
        run = _train_and_test(dataset, graph, mined.assignment, config, split, ks=[5])
        rows.append({
            "resolution": r,
            "num_clusters": mined.num_clusters,
            "quality": mined.quality,
            "mrr5": run["metrics"]["5"]["mrr"],
            "recall5": run["metrics"]["5"]["recall"],
        })
    config_hash = stable_hash({
        "cmd": "sweep", "manifest": manifest_hash, "resolutions": resolutions,
        "train": _train_config(cfg).to_dict(), "split": split,
    })
    doc = {"split": split, "config_hash": config_hash, "rows": rows}
    write_json(out / "sweep.json", doc)
    print(f"{'resolution':>10}  {'clusters':>8}  {'mrr5':>8}")
    for row in rows:
        print(f"{row['resolution']:>10.2f}  {row['num_clusters']:>8}  {row['mrr5']:>8.4f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--out", help="working directory for artifacts")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=float)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt-variant", dest="prompt_variant", choices=VARIANTS)
    p.add_argument("--encoder", choices=ENCODERS)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--d", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipsbr",
        description="Session recommendation with cluster-prompt-fused embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-cluster interaction log")
    _add_common(p)
    p.add_argument("--num-items", dest="num_items", type=int)
    p.add_argument("--num-clusters", dest="num_clusters", type=int)
    p.add_argument("--num-users", dest="num_users", type=int)
    p.add_argument("--sessions-per-user", dest="sessions_per_user", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="sessionize, filter, and split a log")
    _add_common(p)
    p.add_argument("--input")
    p.add_argument("--gap-seconds", dest="gap_seconds", type=int)
    p.add_argument("--min-session-len", dest="min_session_len", type=int)
    p.add_argument("--min-user-sessions", dest="min_user_sessions", type=int)
    p.add_argument("--valid-frac", dest="valid_frac", type=float)
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("mine", help="build the item graph and mine communities")
    _add_common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train a model on the mined artifacts")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank a split with a trained checkpoint")
    _add_common(p)
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.add_argument("--k", dest="k", type=int, action="append",
                   help="metric cutoff; repeat for several")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all prompt variants")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="re-mine and re-train across resolutions")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.add_argument("--resolutions", type=lambda s: [float(x) for x in s.split(",")],
                   help="comma-separated grid, e.g. 0.5,1,2")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        return args.func(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse errors carry their own code
        return 2 if exc.code not in (0, None) else 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
