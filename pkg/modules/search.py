"""
Pruning-strategy search with adaptive BN evaluation.

Pipeline: sample strategies -> prune the full model -> score every candidate
on the sub-validation split (vanilla: inherited BN statistics; adaptive: BN
statistics recomputed on a slice of training data) -> rank by adaptive
accuracy -> fine-tune the top-k -> winner = best fine-tuned accuracy.
"""
import logging
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from modules import netgraph
from modules.batchnorm import BNMode, RecalibrationRule, reset_moving_stats
from modules.config import BN_DISTANCE_COLUMNS
from modules.data import iterate_batches
from modules.errors import ConfigError, DataError, InfeasibleTargetError, PruningError, ShapeError
from modules.naming import BASELINE_ID, candidate_id, constraint_label
from modules.pruner import (
    ImportanceCriterion,
    PruningStrategy,
    apply_strategy,
    make_strategy,
    strategy_flops_ratio,
    strategy_params_ratio,
    uniform_strategy,
)
from modules.trainer import evaluate_accuracy, finetune

logger = logging.getLogger(__name__)

BISECTION_STEPS = 60


@dataclass
class SearchData:
    train: object
    subval: object
    recalib: object
    test: Optional[object] = None


@dataclass
class CandidateRecord:
    id: str
    strategy: PruningStrategy
    acc_adaptive: Optional[float] = None
    acc_vanilla: Optional[float] = None
    acc_finetuned: Optional[float] = None
    flops_ratio: float = 1.0
    params_ratio: float = 1.0
    constraint: str = "unconstrained"
    checkpoint: Optional[str] = None

    def to_dict(self):
        return {
            "id": self.id,
            "strategy": list(self.strategy.ratios),
            "acc_adaptive": self.acc_adaptive,
            "acc_vanilla": self.acc_vanilla,
            "acc_finetuned": self.acc_finetuned,
            "flops_ratio": self.flops_ratio,
            "params_ratio": self.params_ratio,
            "constraint": self.constraint,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=d["id"],
            strategy=PruningStrategy(tuple(d["strategy"]), d.get("flops_ratio", 1.0)),
            acc_adaptive=d.get("acc_adaptive"),
            acc_vanilla=d.get("acc_vanilla"),
            acc_finetuned=d.get("acc_finetuned"),
            flops_ratio=d.get("flops_ratio", 1.0),
            params_ratio=d.get("params_ratio", 1.0),
            constraint=d.get("constraint", "unconstrained"),
            checkpoint=d.get("checkpoint"),
        )


@dataclass
class SearchResult:
    records: list
    winner: Optional[CandidateRecord]
    baseline: Optional[CandidateRecord] = None
    finetuned: list = field(default_factory=list)


def _progress(iterable, **kwargs):
    return tqdm(iterable, leave=False, disable=not sys.stderr.isatty(), **kwargs)


def candidate_seed(seed, cid):
    """Per-candidate seed that does not depend on worker scheduling."""
    return (int(seed), zlib.crc32(cid.encode()))


def constrained_ratio(spec, strategy, constraint):
    if constraint == "params":
        return strategy_params_ratio(spec, strategy)
    return strategy_flops_ratio(spec, strategy)


# ---------------------------------------------------------------------------
# Strategy generation
# ---------------------------------------------------------------------------
def layer_bounds(spec, config):
    """Upper sampling bound per prunable layer; the first one uses the tighter bound."""
    n = len(spec.prunable_indices)
    if n == 0:
        raise PruningError("network has no prunable layers")
    bounds = np.full(n, config.max_ratio)
    bounds[0] = min(config.max_ratio, config.first_layer_max_ratio)
    return bounds


def generate_strategies(spec, config):
    """candidate_count strategies drawn uniformly per layer from [0, bound].

    With a target set, draws are rejected until the realized ratio lies within
    the tolerance; each accepted strategy gets max_attempts draws.
    """
    bounds = layer_bounds(spec, config)
    rng = np.random.default_rng(config.seed)
    target, tol = config.flops_target, config.flops_tolerance
    strategies = []
    for n in range(config.candidate_count):
        for _ in range(config.max_attempts):
            strategy = make_strategy(spec, rng.uniform(0.0, bounds))
            if target is None or abs(constrained_ratio(spec, strategy, config.constraint) - target) <= tol:
                strategies.append(strategy)
                break
        else:
            raise InfeasibleTargetError(
                f"no strategy with {config.constraint} ratio {target} ± {tol} found in "
                f"{config.max_attempts} attempts (candidate {n}); widen the tolerance or raise max_ratio"
            )
    logger.info("generated %d strategies (target=%s)", len(strategies), target)
    return strategies


def filter_pruning_baseline(spec, target, constraint="flops", tolerance=None):
    """Uniform strategy for a target ratio.

    Without a tolerance this is the largest realized ratio not above target.
    With one it is the realized ratio closest to target, which must lie
    within target ± tolerance like every generated candidate.
    """
    if target >= 1.0:
        return uniform_strategy(spec, 0.0)

    def realized(ratio):
        return constrained_ratio(spec, uniform_strategy(spec, ratio), constraint)

    def within_band(ratio):
        return tolerance is None or abs(realized(ratio) - target) <= tolerance

    widest = [spec.layers[i].out_channels for i in spec.prunable_indices]
    # the largest ratio that keeps one filter in every prunable layer
    hi = min((c - 1) / c for c in widest) if min(widest) > 1 else 0.0
    if realized(hi) > target:
        if tolerance is not None and within_band(hi):
            return uniform_strategy(spec, hi)
        raise InfeasibleTargetError(f"uniform pruning cannot reach {constraint} ratio {target}")
    lo = 0.0
    for _ in range(BISECTION_STEPS):
        mid = (lo + hi) / 2
        if realized(mid) <= target:
            hi = mid
        else:
            lo = mid
    if tolerance is not None and abs(realized(lo) - target) < abs(realized(hi) - target):
        hi = lo
    if not within_band(hi):
        raise InfeasibleTargetError(
            f"no uniform strategy has {constraint} ratio within {target} ± {tolerance}"
        )
    return uniform_strategy(spec, hi)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def evaluate_vanilla(spec, params, subval):
    """Accuracy with the BN statistics inherited from the full model."""
    return evaluate_accuracy(spec, params, subval)


def recalibrate_bn(spec, params, split, iterations, batch_size, seed,
                   momentum=0.9, rule=RecalibrationRule.MOMENTUM):
    """Reset every BN layer's moving statistics and re-estimate them in place.

    Runs `iterations` forward passes in RECALIBRATE mode, cycling through
    `split` with a fresh seeded shuffle per cycle. Learnable parameters are
    not touched.
    """
    if split is None or len(split) < 2:
        raise DataError("recalibration needs at least 2 samples")
    if batch_size < 2:
        raise DataError(f"recalibration batch size must be >= 2, got {batch_size}")
    base_seed = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    for state in params.bn.values():
        reset_moving_stats(state)
        state.recalib_momentum = momentum
        state.recalib_rule = RecalibrationRule(rule)

    done, cycle = 0, 0
    while done < iterations:
        for images, _ in iterate_batches(split, batch_size, seed=(*base_seed, cycle), shuffle=True):
            if len(images) < 2:
                continue
            netgraph.forward(spec, params, images, BNMode.RECALIBRATE)
            done += 1
            if done == iterations:
                break
        cycle += 1
    params.set_bn_mode(BNMode.EVAL)
    return params


def evaluate_adaptive(spec, params, recalib, subval, config, batch_size, seed=None):
    """Adaptive BN accuracy; mutates only the BN moving statistics of params."""
    recalibrate_bn(
        spec, params, recalib, config.recalib_iterations, batch_size,
        seed=config.seed if seed is None else seed,
        momentum=config.recalib_momentum, rule=config.recalib_rule,
    )
    return evaluate_accuracy(spec, params, subval)


def _merge_moments(acc, flat):
    """Fold an (n, C) block into running (count, mean, squared deviations)."""
    n_b = flat.shape[0]
    mean_b = flat.mean(axis=0)
    m2_b = ((flat - mean_b) ** 2).sum(axis=0)
    if acc is None:
        return n_b, mean_b, m2_b
    n_a, mean_a, m2_a = acc
    n = n_a + n_b
    delta = mean_b - mean_a
    return n, mean_a + delta * n_b / n, m2_a + m2_b + delta ** 2 * n_a * n_b / n


def true_bn_stats(spec, params, split, batch_size):
    """Copy of params whose BN statistics are pooled over one pass of split.

    Every BN layer gets the mean and unbiased variance of its input over all
    samples, not an average of per-batch values. Upstream BN layers normalize
    with batch statistics during the pass. A trailing single sample joins the
    batch before it.
    """
    if split is None or len(split) < 2:
        raise DataError("true BN statistics need at least 2 samples")
    if batch_size < 2:
        raise DataError(f"batch size must be >= 2, got {batch_size}")
    out = params.copy()
    moments = {}

    def observer(i, layer, inp, _):
        if layer.kind == netgraph.LayerKind.BATCHNORM:
            flat = np.moveaxis(inp, 1, -1).reshape(-1, inp.shape[1]).astype(np.float64)
            moments[i] = _merge_moments(moments.get(i), flat)

    starts = list(range(0, len(split), batch_size))
    if len(split) - starts[-1] < 2:
        starts.pop()
    for lo, hi in zip(starts, starts[1:] + [len(split)]):
        netgraph.forward(spec, out, split.images[lo:hi], BNMode.RECALIBRATE, observer=observer)

    for i, (n, mean, m2) in moments.items():
        state = out.bn[i]
        reset_moving_stats(state)
        state.moving_mean[...] = mean
        state.moving_var[...] = m2 / (n - 1)
    out.set_bn_mode(BNMode.EVAL)
    return out


def prepare_candidate(spec, params, record, data, config, batch_size, criterion):
    """Prune and recalibrate; returns (PrunedModel, acc_vanilla, acc_adaptive)."""
    model = apply_strategy(spec, params, record.strategy, criterion)
    acc_vanilla = evaluate_vanilla(model.spec, model.params, data.subval) if config.analysis else None
    acc_adaptive = evaluate_adaptive(
        model.spec, model.params, data.recalib, data.subval, config, batch_size,
        seed=candidate_seed(config.seed, record.id),
    )
    return model, acc_vanilla, acc_adaptive


def evaluate_candidate(spec, params, record, data, config, batch_size, criterion):
    _, acc_vanilla, acc_adaptive = prepare_candidate(spec, params, record, data, config, batch_size, criterion)
    return replace(record, acc_vanilla=acc_vanilla, acc_adaptive=acc_adaptive)


def new_record(spec, cid, strategy, label):
    return CandidateRecord(
        id=cid,
        strategy=strategy,
        flops_ratio=strategy.realized_flops_ratio,
        params_ratio=strategy_params_ratio(spec, strategy),
        constraint=label,
    )


def _run_jobs(fn, items, workers, desc):
    """fn(item) for every item; yields results as they finish (in order for one worker)."""
    if workers <= 1:
        for item in _progress(items, desc=desc):
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, item) for item in items]
        for future in _progress(as_completed(futures), total=len(futures), desc=desc):
            yield future.result()


def evaluate_candidates(spec, params, records, data, config, batch_size,
                        criterion=ImportanceCriterion.L1, workers=1, store=None):
    """Score every record; each result is appended to store as soon as it completes."""
    def job(record):
        return evaluate_candidate(spec, params, record, data, config, batch_size, criterion)

    done = {}
    for record in _run_jobs(job, records, workers, "evaluate"):
        done[record.id] = record
        if store is not None:
            store.append(record.to_dict())
        logger.info("%s flops=%.3f adaptive=%.4f vanilla=%s", record.id, record.flops_ratio,
                    record.acc_adaptive, record.acc_vanilla)
    return [done[r.id] for r in records]


def finetune_candidates(spec, params, records, data, config, finetune_config, batch_size,
                        criterion=ImportanceCriterion.L1, workers=1, store=None, on_model=None):
    """Fine-tune each record's pruned model from its adaptive-BN state.

    on_model(record, model) receives every fine-tuned model (the CLI uses it to
    write winner checkpoints).
    """
    def job(record):
        model, _, _ = prepare_candidate(spec, params, record, data, config, batch_size, criterion)
        acc = finetune(model.spec, model.params, data.train, data.subval, finetune_config)
        return replace(record, acc_finetuned=acc), model

    done = {}
    for record, model in _run_jobs(job, records, workers, "finetune"):
        if on_model is not None:
            record = on_model(record, model) or record
        done[record.id] = record
        if store is not None:
            store.append(record.to_dict())
        logger.info("%s finetuned=%.4f", record.id, record.acc_finetuned)
    return [done[r.id] for r in records]


def rank_records(records):
    """Adaptive accuracy descending, id ascending on ties."""
    return sorted(records, key=lambda r: (-r.acc_adaptive, r.id))


def pick_winner(ranked):
    tuned = [r for r in ranked if r.acc_finetuned is not None]
    if not tuned:
        return ranked[0] if ranked else None
    best = max(r.acc_finetuned for r in tuned)
    return next(r for r in tuned if r.acc_finetuned == best)


def run_search(spec, params, data, config, finetune_config, batch_size,
               criterion=None, workers=1, store=None, on_model=None):
    """Full search; completed records found in store are reused, not recomputed."""
    criterion = ImportanceCriterion(criterion or config.criterion)
    label = config.label or constraint_label(config.flops_target)
    strategies = generate_strategies(spec, config)
    records = [new_record(spec, candidate_id(n), s, label) for n, s in enumerate(strategies)]

    if config.baseline:
        if config.flops_target is None:
            logger.warning("baseline requested without a target; skipping it")
        else:
            base = filter_pruning_baseline(spec, config.flops_target, config.constraint, config.flops_tolerance)
            records.append(new_record(spec, BASELINE_ID, base, label))

    previous = store.load_records() if store is not None else {}
    for r in records:
        stored = previous.get(r.id, {}).get("strategy")
        if stored is not None and stored != list(r.strategy.ratios):
            raise ConfigError(
                f"{store.path}: {r.id} was stored with strategy {stored}, this run draws "
                f"{list(r.strategy.ratios)}; use a fresh output directory"
            )
    pending = [r for r in records if previous.get(r.id, {}).get("acc_adaptive") is None]
    if len(pending) < len(records):
        logger.info("resuming: %d of %d candidates already evaluated", len(records) - len(pending), len(records))
    evaluated = {r.id: r for r in evaluate_candidates(
        spec, params, pending, data, config, batch_size, criterion, workers, store)}
    records = [evaluated.get(r.id) or CandidateRecord.from_dict(previous[r.id]) for r in records]

    baseline = next((r for r in records if r.id == BASELINE_ID), None)
    ranked = rank_records([r for r in records if r.id != BASELINE_ID])

    to_tune = [r for r in ranked[:config.top_k_to_finetune] if r.acc_finetuned is None]
    if baseline is not None and baseline.acc_finetuned is None:
        to_tune.append(baseline)
    if to_tune:
        tuned = {r.id: r for r in finetune_candidates(
            spec, params, to_tune, data, config, finetune_config, batch_size,
            criterion, workers, store, on_model)}
        ranked = [tuned.get(r.id, r) for r in ranked]
        baseline = tuned.get(BASELINE_ID, baseline)

    winner = pick_winner(ranked[:max(config.top_k_to_finetune, 1)])
    finetuned = [r for r in ranked if r.acc_finetuned is not None]
    return SearchResult(records=ranked, winner=winner, baseline=baseline, finetuned=finetuned)


# ---------------------------------------------------------------------------
# BN statistics distance
# ---------------------------------------------------------------------------
def bn_stats_distance(spec, params_a, params_b):
    """Per-channel |mean_a - mean_b| and |var_a - var_b| for every BN layer."""
    rows = []
    for i in spec.bn_indices:
        a, b = params_a.bn.get(i), params_b.bn.get(i)
        if a is None or b is None or a.channels != b.channels:
            raise ShapeError(f"BN layer {i} does not match between the two models")
        dmean = np.abs(a.moving_mean.astype(np.float64) - b.moving_mean)
        dvar = np.abs(a.moving_var.astype(np.float64) - b.moving_var)
        for c in range(a.channels):
            rows.append({"layer": i, "channel": c, "dmean": float(dmean[c]), "dvar": float(dvar[c])})
    return pd.DataFrame(rows, columns=["layer", "channel", "dmean", "dvar"])


def bn_distance_table(spec, global_params, adaptive_params, true_params):
    """Global-vs-true and adaptive-vs-true distances side by side."""
    g = bn_stats_distance(spec, global_params, true_params)
    a = bn_stats_distance(spec, adaptive_params, true_params)
    table = pd.DataFrame({
        "layer": g["layer"],
        "channel": g["channel"],
        "dmean_global": g["dmean"],
        "dmean_adaptive": a["dmean"],
        "dvar_global": g["dvar"],
        "dvar_adaptive": a["dvar"],
    })
    return table[BN_DISTANCE_COLUMNS]
