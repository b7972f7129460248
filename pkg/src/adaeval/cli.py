"""Command-line entry point: dataset generation, training, evaluation,
ablations, and report aggregation as reproducible seeded runs.

Every command writes a resolved_config.json (all flags after defaulting,
plus the run's one timestamp field) into its output directory, emits
structured errors as single-line JSON on stderr, and exits 0 only if all
requested work succeeded. ADAEVAL_SEED serves as the default seed when
--seed is not given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, generate_synthetic, read_dataset
from .evalkit import (CostModel, baseline_seq_k, baseline_uniform_k,
                      eval_offline, eval_online, write_curves_csv,
                      write_results_json)
from .gumbel import tau_at
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import train_from_scratch

DEFAULT_SPEC_PATH = Path(__file__).parent / "configs" / "default_synthetic.json"


def _default_seed() -> int:
    return int(os.environ.get("ADAEVAL_SEED", "0"))


def _fail(message: str, **extra) -> int:
    payload = {"error": message, **extra}
    print(json.dumps(payload), file=sys.stderr)
    return 1


def _write_resolved_config(out_dir: Path, command: str, values: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
               **{k: v for k, v in sorted(values.items())}}
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=1))


def _model_config(manifest, args, **overrides) -> ModelConfig:
    base = dict(
        coarse_dim=manifest.coarse_dim, fine_dim=manifest.fine_dim,
        coarse_hidden=args.hidden_coarse, fine_hidden=args.hidden_fine,
        num_classes=manifest.num_classes, seq_len=manifest.seq_len,
        target_usage=args.gamma, usage_penalty=getattr(args, "lambda"),
        tau_start=args.tau0, tau_decay=args.tau_decay, tau_min=args.tau_min,
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, sync=not args.no_sync,
        force_gate=1 if args.force_fine else (0 if args.force_coarse else None),
    )
    base.update(overrides)
    return ModelConfig(**base)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=0.05,
                   help="target fraction of fine reads")
    p.add_argument("--lambda", type=float, default=2.0, dest="lambda",
                   help="usage penalty weight")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--hidden-coarse", type=int, default=8)
    p.add_argument("--hidden-fine", type=int, default=32)
    p.add_argument("--tau0", type=float, default=5.0)
    p.add_argument("--tau-decay", type=float, default=0.9)
    p.add_argument("--tau-min", type=float, default=0.5)
    p.add_argument("--force-fine", action="store_true",
                   help="gate pinned to the fine path (always-fine reference)")
    p.add_argument("--force-coarse", action="store_true",
                   help="gate pinned to skip (coarse-only reference)")
    p.add_argument("--no-sync", action="store_true",
                   help="ablation: skipped steps keep the stale fine state")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec_path = Path(args.spec) if args.spec else DEFAULT_SPEC_PATH
    spec_dict = json.loads(spec_path.read_text())
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_dict)
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    out = Path(args.out)
    dataset = generate_synthetic(spec, sizes, out)
    _write_resolved_config(out, "gen-data",
                           {"spec": spec.to_dict(), "sizes": sizes, "out": str(out)})
    m = dataset.manifest
    print(f"dataset at {out}: {m.num_classes} classes, T={m.seq_len}, "
          f"dims {m.coarse_dim}/{m.fine_dim}, "
          + ", ".join(f"{k}={len(v)}" for k, v in m.splits.items()))
    return 0


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    train_s = dataset.load_split("train")
    val_s = dataset.load_split("val")
    config = _model_config(dataset.manifest, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "epochs.jsonl"
    with open(log_path, "w") as fh:
        def log_fn(entry):
            fh.write(json.dumps(entry.to_dict()) + "\n")
            fh.flush()
        params, logs = train_from_scratch(config, train_s, val_s, log_fn=log_fn)
    save_checkpoint(params, config, out / "checkpoint")
    _write_resolved_config(out, "train",
                           {"data": str(args.data), "config": config.to_dict()})
    last = logs[-1]
    print(f"trained {config.epochs} epochs: val_top1={last.val_top1:.4f} "
          f"val_usage={last.val_usage:.4f} (tau={last.tau:.3f})")
    return 0


def _cost_model(mode: str) -> CostModel:
    return CostModel.paper_table() if mode == "paper" else CostModel.full()


def cmd_eval(args) -> int:
    params, config = load_checkpoint(Path(args.ckpt))
    dataset = read_dataset(args.data)
    split = args.split or ("test" if "test" in dataset.manifest.splits else "val")
    if split not in dataset.manifest.splits:
        return _fail(f"split {split!r} not in dataset", have=dataset.split_names())
    if (dataset.manifest.coarse_dim != config.coarse_dim
            or dataset.manifest.fine_dim != config.fine_dim
            or dataset.manifest.seq_len != config.seq_len):
        return _fail("checkpoint/dataset dimension mismatch",
                     checkpoint=[config.coarse_dim, config.fine_dim, config.seq_len],
                     dataset=[dataset.manifest.coarse_dim, dataset.manifest.fine_dim,
                              dataset.manifest.seq_len])
    samples = dataset.load_split(split)
    cost = _cost_model(args.cost_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []

    if args.mode == "offline":
        res = eval_offline(params, config, samples, cost)
        results.append(res)
        write_results_json(res, out / "results.json")
        print(f"offline[{split}] mAP={res.mAP:.4f} top1={res.top1:.4f} "
              f"gflops={res.mean_gflops_per_video:.3f}")
    else:
        budgets = [int(b) for b in args.budgets.split(",")]
        fine_ref = None
        if args.fine_ckpt:
            fine_ref = load_checkpoint(Path(args.fine_ckpt))
        for k in budgets:
            res = eval_online(params, config, samples, budget=k, cost=cost)
            results.append(res)
            print(f"online[{split}] K={k}: top1={res.top1:.4f} "
                  f"gflops={res.mean_gflops_per_video:.3f}")
            if fine_ref is not None and k >= 1:
                stop_steps = {v.id: v.stop_step for v in res.videos}
                fp, fc = fine_ref
                uni = baseline_uniform_k(samples, k, stop_steps, fp, fc, cost)
                seq = baseline_seq_k(samples, k, fp, fc, cost)
                results.extend([uni, seq])
                print(f"  uniform-k top1={uni.top1:.4f} gflops={uni.mean_gflops_per_video:.3f}"
                      f" | seq-k top1={seq.top1:.4f} gflops={seq.mean_gflops_per_video:.3f}")
        write_results_json(results[0], out / "results.json")
        for i, res in enumerate(results):
            write_results_json(res, out / f"results_{res.method}_{res.budget}.json")
    write_curves_csv(results, out / "curves.csv")
    _write_resolved_config(out, "eval", {
        "ckpt": str(args.ckpt), "data": str(args.data), "mode": args.mode,
        "split": split, "cost_mode": args.cost_mode,
        "budgets": getattr(args, "budgets", None),
        "fine_ckpt": str(args.fine_ckpt) if args.fine_ckpt else None})
    return 0


def _train_and_eval(config: ModelConfig, dataset, cost: CostModel, method: str,
                    out: Path):
    train_s = dataset.load_split("train")
    val_s = dataset.load_split("val")
    params, logs = train_from_scratch(config, train_s, val_s)
    res = eval_offline(params, config, val_s, cost, method=method)
    run_dir = out / method
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, config, run_dir / "checkpoint")
    write_results_json(res, run_dir / "results.json")
    return res, logs[-1]


def cmd_ablate(args) -> int:
    dataset = read_dataset(args.data)
    cost = _cost_model(args.cost_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    if args.what == "sync":
        for method, over in (("sync-on", {}), ("sync-off", {"sync": False})):
            config = _model_config(dataset.manifest, args, **over)
            res, last = _train_and_eval(config, dataset, cost, method, out)
            rows.append([method, "", res.top1, res.mAP,
                         res.mean_gflops_per_video, last.val_usage])
    elif args.what == "gamma":
        for gamma in (float(g) for g in args.gammas.split(",")):
            config = _model_config(dataset.manifest, args, target_usage=gamma)
            method = f"gamma-{gamma:g}"
            res, last = _train_and_eval(config, dataset, cost, method, out)
            rows.append([method, gamma, res.top1, res.mAP,
                         res.mean_gflops_per_video, last.val_usage])
    elif args.what == "hidden":
        for hc in (int(h) for h in args.coarse_hiddens.split(",")):
            config = _model_config(dataset.manifest, args, coarse_hidden=hc)
            method = f"hc-{hc}"
            res, last = _train_and_eval(config, dataset, cost, method, out)
            rows.append([method, hc, res.top1, res.mAP,
                         res.mean_gflops_per_video, last.val_usage])
    else:
        return _fail(f"unknown ablation {args.what!r}")

    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "setting", "top1", "mAP", "mean_gflops", "val_usage"])
        writer.writerows(rows)
    _write_resolved_config(out, "ablate", {
        "what": args.what, "data": str(args.data),
        "gammas": getattr(args, "gammas", None),
        "coarse_hiddens": getattr(args, "coarse_hiddens", None),
        "config_defaults": _model_config(dataset.manifest, args).to_dict()})
    for row in rows:
        print("  ".join(str(v) for v in row))
    print(f"ablation table: {table}")
    return 0


def cmd_report(args) -> int:
    runs = Path(args.runs)
    found = sorted(runs.rglob("results*.json"))
    rows, failures = [], []
    for path in found:
        try:
            d = json.loads(path.read_text())
            rows.append([d["method"], d.get("budget"), d["top1"], d["mAP"],
                         d["mean_gflops_per_video"], str(path.relative_to(runs))])
        except (json.JSONDecodeError, KeyError) as exc:
            failures.append(path)
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
    if not rows:
        return _fail("no readable results.json files", searched=str(runs),
                     malformed=[str(p) for p in failures])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "budget_K", "top1", "mAP", "mean_gflops", "source"])
        writer.writerows(rows)
    print(f"aggregated {len(rows)} results into {args.out}"
          + (f" ({len(failures)} skipped)" if failures else ""))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaeval",
        description="coarse-to-fine gated sequence classifier: data, training, "
                    "evaluation, ablations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", help="SyntheticSpec JSON (default: packaged spec)")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=500)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the spec's seed")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=_default_seed())
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["offline", "online"], default="offline")
    p.add_argument("--budgets", default="1,2,4,8",
                   help="online fine-read budgets, comma separated")
    p.add_argument("--cost-mode", choices=["paper", "full"], default="full")
    p.add_argument("--split", default=None)
    p.add_argument("--fine-ckpt", default=None,
                   help="always-fine checkpoint powering uniform-k/seq-k baselines")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--what", choices=["sync", "gamma", "hidden"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--gammas", default="0.05,0.2,0.5")
    p.add_argument("--coarse-hiddens", default="2,8,32")
    p.add_argument("--cost-mode", choices=["paper", "full"], default="full")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="aggregate results.json files into a CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # structured single-line errors for scripting
        return _fail(f"{type(exc).__name__}: {exc}", command=args.command)


if __name__ == "__main__":
    sys.exit(main())
