"""
EagleEye pruning bench: command-line entry point.

    python main.py [-v] [--config FILE] [--seed N] [--workers N] [--out-dir DIR] COMMAND ...

Commands: train, search, finetune, correlate, bn-distance, eval.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

load_dotenv()

from modules import correlation, netgraph, search
from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.config import (
    CANDIDATE_CSV_COLUMNS,
    HISTOGRAM_COLUMNS,
    load_experiment_config,
    write_resolved_config,
)
from modules.data import load_dataset, make_splits
from modules.errors import CheckpointError, ConfigError, DataError, EagleEyeError
from modules.naming import BASELINE_ID, short_strategy
from modules.pruner import apply_strategy, pruned_spec, uniform_strategy
from modules.run_names import new_run_dir
from modules.store import ResultsStore, append_jsonl, save_run_summary, write_run_meta
from modules.trainer import evaluate_accuracy, finetune, train

logger = logging.getLogger("eagleeye")

HISTOGRAM_BINS = 20
HISTOGRAM_HEADROOM = 1.5


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------
def load_data(cfg):
    """Dataset splits for a run: train', subval, recalib and the optional test split."""
    train_full, test = load_dataset(cfg.dataset)
    splits = make_splits(train_full, cfg.search.subval_fraction, cfg.search.recalib_fraction, cfg.search.seed)
    print(f"Data: {len(splits['train'])} train, {len(splits['subval'])} subval, "
          f"{len(splits['recalib'])} recalib, {len(test) if test is not None else 0} test")
    return search.SearchData(splits["train"], splits["subval"], splits["recalib"], test)


def parse_target(text):
    if text == "none":
        return None
    try:
        target = float(text)
    except ValueError:
        raise ConfigError(f"--target must be a ratio in (0, 1] or 'none', got {text!r}") from None
    if not 0.0 < target <= 1.0:
        raise ConfigError(f"--target must be in (0, 1], got {target}")
    return target


def report_split(data):
    return data.test if data.test is not None else data.subval


def write_csv(df, path):
    df.to_csv(path, index=False, float_format="%.6f")
    print(f"Wrote {path}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_train(cfg, args, out_dir):
    data = load_data(cfg)
    spec = netgraph.build_architecture(
        cfg.model.architecture, data.train.sample_shape, data.train.class_count,
        cfg.model.widths, cfg.model.width_mult,
    )
    params = netgraph.init_params(spec, seed=cfg.train.seed)
    print(f"Model: {cfg.model.architecture}, {netgraph.count_params(spec).total} params, "
          f"{netgraph.count_flops(spec).total} MACs")

    log_path = out_dir / "train_log.jsonl"
    logs = train(spec, params, data.train, cfg.train, eval_split=data.subval,
                 on_epoch=lambda log: append_jsonl(log_path, log.to_dict()))

    eval_acc = logs[-1].eval_acc if logs else evaluate_accuracy(spec, params, data.subval)
    ckpt = save_checkpoint(out_dir / "model.egck", spec, params, meta={"command": "train", "eval_acc": eval_acc})
    test_acc = evaluate_accuracy(spec, params, data.test) if data.test is not None else None
    save_run_summary(out_dir, "train", [], {"eval_acc": eval_acc, "test_acc": test_acc, "checkpoint": ckpt.name})
    print(f"Done! subval acc {eval_acc:.4f}" + (f", test acc {test_acc:.4f}" if test_acc is not None else ""))
    return 0


def cmd_search(cfg, args, out_dir):
    full = load_checkpoint(args.checkpoint)
    data = load_data(cfg)
    scfg = cfg.search
    if args.target is not None:
        scfg = scfg.model_copy(update={"flops_target": parse_target(args.target)})
    ckpt_dir = out_dir / "checkpoints"

    def save_tuned(record, model):
        path = save_checkpoint(ckpt_dir / f"{record.id}.egck", model.spec, model.params,
                               strategy=record.strategy, criterion=scfg.criterion,
                               meta={"command": "search", "id": record.id, "acc_finetuned": record.acc_finetuned})
        return replace(record, checkpoint=str(path.relative_to(out_dir)))

    result = search.run_search(
        full.spec, full.params, data, scfg, cfg.finetune, cfg.train.batch_size,
        workers=args.workers, store=ResultsStore(out_dir / "candidates.jsonl"), on_model=save_tuned,
    )

    rows = [r.to_dict() for r in result.records]
    write_csv(pd.DataFrame(rows, columns=CANDIDATE_CSV_COLUMNS), out_dir / "candidates.csv")
    write_csv(correlation.scatter_table(result.records), out_dir / "scatter.csv")

    winner = result.winner
    extra = {"winner": winner.id if winner else None}
    if winner is not None and winner.checkpoint and data.test is not None:
        best = load_checkpoint(out_dir / winner.checkpoint)
        extra["winner_test_acc"] = evaluate_accuracy(best.spec, best.params, data.test)
    if result.baseline is not None:
        extra["baseline"] = result.baseline.to_dict()
    save_run_summary(out_dir, "search", rows + ([result.baseline.to_dict()] if result.baseline else []), extra)

    if winner is not None:
        tuned = f"{winner.acc_finetuned:.4f}" if winner.acc_finetuned is not None else "n/a"
        print(f"Winner {winner.id}: flops {winner.flops_ratio:.3f}, adaptive {winner.acc_adaptive:.4f}, "
              f"finetuned {tuned} [{short_strategy(winner.strategy)}]")
    if result.baseline is not None and result.baseline.acc_finetuned is not None:
        print(f"Baseline: flops {result.baseline.flops_ratio:.3f}, finetuned {result.baseline.acc_finetuned:.4f}")
    print(f"Done! {len(result.records)} evaluated, {len(result.finetuned)} fine-tuned")
    return 0


def _histogram_rows(params, layers, edges, epoch):
    rows = []
    for i in layers:
        counts = netgraph.weight_histogram(params, i, edges[i])
        for lo, hi, n in zip(edges[i][:-1], edges[i][1:], counts):
            rows.append({"epoch": epoch, "layer": i, "bin_lo": lo, "bin_hi": hi, "count": int(n)})
    return rows


def cmd_finetune(cfg, args, out_dir):
    ckpt = load_checkpoint(args.checkpoint)
    data = load_data(cfg)
    spec, params = ckpt.spec, ckpt.params

    layers = spec.weighted_indices
    # bin edges fixed at epoch 0
    edges = {i: np.linspace(0.0, float(np.abs(params.weights[i]).max()) * HISTOGRAM_HEADROOM or 1.0,
                            HISTOGRAM_BINS + 1) for i in layers}
    hist_rows = _histogram_rows(params, layers, edges, 0)
    log_path = out_dir / "finetune_log.jsonl"

    def on_epoch(log):
        append_jsonl(log_path, log.to_dict())
        hist_rows.extend(_histogram_rows(params, layers, edges, log.epoch))

    acc = finetune(spec, params, data.train, data.subval, cfg.finetune, on_epoch=on_epoch)
    write_csv(pd.DataFrame(hist_rows, columns=HISTOGRAM_COLUMNS), out_dir / "histograms.csv")
    save_checkpoint(out_dir / "finetuned.egck", spec, params, strategy=ckpt.strategy, criterion=ckpt.criterion,
                    meta={"command": "finetune", "acc_finetuned": acc})
    test_acc = evaluate_accuracy(spec, params, data.test) if data.test is not None else None
    save_run_summary(out_dir, "finetune", [], {"acc_finetuned": acc, "test_acc": test_acc})
    print(f"Done! fine-tuned subval acc {acc:.4f}")
    return 0


def cmd_correlate(cfg, args, out_dir):
    records = []
    full = data = None
    for path in args.candidates:
        if not path.exists():
            raise DataError(f"{path}: candidates file not found")
        store = ResultsStore(path)
        loaded = [search.CandidateRecord.from_dict(r) for r in store.load_records().values()]
        pending = [r for r in loaded if r.acc_finetuned is None and r.id != BASELINE_ID]
        if pending:
            if args.checkpoint is None:
                raise CheckpointError(f"{path}: {len(pending)} candidates need fine-tuning; pass --checkpoint")
            if full is None:
                full = load_checkpoint(args.checkpoint)
                data = load_data(cfg)
            print(f"Fine-tuning {len(pending)} candidates from {path}")
            tuned = {r.id: r for r in search.finetune_candidates(
                full.spec, full.params, pending, data, cfg.search, cfg.finetune, cfg.train.batch_size,
                cfg.search.criterion, args.workers, store)}
            loaded = [tuned.get(r.id, r) for r in loaded]
        records.extend(r for r in loaded if r.id != BASELINE_ID)

    groups = correlation.group_by_constraint(records)
    reports = [correlation.build_report(group, label) for label, group in groups.items()]
    write_csv(correlation.report_table(reports), out_dir / "correlation.csv")
    write_csv(correlation.scatter_table(records), out_dir / "scatter.csv")

    lift = {}
    for label, group in groups.items():
        entry = {}
        if all(r.acc_vanilla is not None for r in group):
            entry = correlation.evaluation_lift(group)
        k = min(cfg.search.top_k_to_finetune or 1, len(group))
        entry["topk_agreement_adaptive"] = correlation.topk_agreement(group, k, "adaptive")
        if all(r.acc_vanilla is not None for r in group):
            entry["topk_agreement_vanilla"] = correlation.topk_agreement(group, k, "vanilla")
        lift[label] = entry
    (out_dir / "lift.json").write_text(json.dumps(lift, indent=2, sort_keys=True) + "\n")
    save_run_summary(out_dir, "correlate", [r.to_dict() for r in records])

    for r in reports:
        print(f"{r.constraint:>14}  n={r.n:<4} spearman adaptive {r.spearman_adaptive:+.3f}  "
              f"vanilla {r.spearman_vanilla:+.3f}")
    print(f"Done! {len(reports)} constraint groups, {len(records)} candidates")
    return 0


def cmd_bn_distance(cfg, args, out_dir):
    full = load_checkpoint(args.full)
    pruned = load_checkpoint(args.pruned)
    strategy = pruned.strategy or uniform_strategy(full.spec, 0.0)
    if pruned_spec(full.spec, strategy) != pruned.spec:
        raise CheckpointError(f"{args.pruned}: strategy does not reproduce its own spec from {args.full}")
    data = load_data(cfg)
    scfg = cfg.search

    inherited = apply_strategy(full.spec, full.params, strategy, pruned.criterion or scfg.criterion)
    adaptive = search.recalibrate_bn(
        inherited.spec, inherited.params.copy(), data.recalib, scfg.recalib_iterations, cfg.train.batch_size,
        seed=scfg.seed, momentum=scfg.recalib_momentum, rule=scfg.recalib_rule,
    )
    truth = search.true_bn_stats(inherited.spec, inherited.params, report_split(data), cfg.train.batch_size)

    table = search.bn_distance_table(inherited.spec, inherited.params, adaptive, truth)
    write_csv(table, out_dir / "bn_distance.csv")
    means = table.drop(columns=["layer", "channel"]).mean().round(6).to_dict()
    save_run_summary(out_dir, "bn-distance", [], {"means": means, "channels": len(table)})
    print(f"Mean |dmean|: global {means['dmean_global']:.4f} vs adaptive {means['dmean_adaptive']:.4f}; "
          f"mean |dvar|: global {means['dvar_global']:.4f} vs adaptive {means['dvar_adaptive']:.4f}")
    return 0


def cmd_eval(cfg, args, out_dir):
    ckpt = load_checkpoint(args.checkpoint)
    data = load_data(cfg)
    split = report_split(data)
    acc = evaluate_accuracy(ckpt.spec, ckpt.params, split)
    save_run_summary(out_dir, "eval", [], {"accuracy": acc, "split": split.role})
    print(f"Accuracy on {split.role}: {acc:.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "search": cmd_search,
    "finetune": cmd_finetune,
    "correlate": cmd_correlate,
    "bn-distance": cmd_bn_distance,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="eagleeye", description="Adaptive-BN pruning candidate search bench")
    parser.add_argument("--config", type=Path, help="experiment TOML file (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--workers", type=int, default=1, help="parallel candidate jobs (1 = deterministic)")
    parser.add_argument("--out-dir", type=Path, help="output directory (default: runs/<Name>-<timestamp>)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", help="train the full-size model")

    p = sub.add_parser("search", help="sample, evaluate and rank pruning candidates")
    p.add_argument("--checkpoint", type=Path, required=True, help="trained full-size model")
    p.add_argument("--target", help="FLOPs/params ratio target, or 'none' for unconstrained")

    p = sub.add_parser("finetune", help="fine-tune one pruned checkpoint with weight histograms")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("correlate", help="fine-tune all candidates and report correlations")
    p.add_argument("--candidates", type=Path, nargs="+", required=True, help="candidates.jsonl files")
    p.add_argument("--checkpoint", type=Path, help="full-size model, needed when candidates lack fine-tuning")

    p = sub.add_parser("bn-distance", help="per-channel BN statistic distances")
    p.add_argument("--full", type=Path, required=True)
    p.add_argument("--pruned", type=Path, required=True)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the test (or subval) split")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def setup_logging(verbosity):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    started_at = datetime.now(timezone.utc)

    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_experiment_config(args.config, seed=args.seed, out_dir=args.out_dir)
        out_dir = Path(cfg.out_dir) if cfg.out_dir else new_run_dir()
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(cfg, out_dir)
        print(f"Run directory: {out_dir}")
        try:
            return COMMANDS[args.command](cfg, args, out_dir)
        finally:
            write_run_meta(out_dir, args.command, started_at, argv)
    except EagleEyeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
