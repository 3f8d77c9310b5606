"""
Pearson / Spearman / Kendall (tau-b) coefficients and the correlation-study
tables built from candidate records.

X1 = acc_adaptive, X2 = acc_vanilla, Y = acc_finetuned.
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import stats

from modules.config import REPORT_COLUMNS, SCATTER_COLUMNS
from modules.errors import DataError, UndefinedCorrelationError
from modules.naming import constraint_sort_key

logger = logging.getLogger(__name__)

MIN_REPORT_RECORDS = 3


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise UndefinedCorrelationError(f"need two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UndefinedCorrelationError("inputs contain NaN/Inf")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    return x, y


def pearson(x, y):
    x, y = _pair(x, y)
    return float(stats.pearsonr(x, y).statistic)


def spearman(x, y):
    """Pearson of average ranks."""
    x, y = _pair(x, y)
    return pearson(stats.rankdata(x), stats.rankdata(y))


def kendall(x, y):
    x, y = _pair(x, y)
    return float(stats.kendalltau(x, y, variant="b").statistic)


COEFFICIENTS = {"pearson": pearson, "spearman": spearman, "kendall": kendall}


@dataclass
class CorrelationReport:
    constraint: str
    n: int
    pearson_adaptive: float
    pearson_vanilla: float
    spearman_adaptive: float
    spearman_vanilla: float
    kendall_adaptive: float
    kendall_vanilla: float

    def to_row(self):
        return asdict(self)


def _safe(fn, x, y, what):
    try:
        return fn(x, y)
    except UndefinedCorrelationError as e:
        logger.warning("%s undefined: %s", what, e)
        return math.nan


def build_report(records, label):
    """Six coefficients for one constraint group; undefined ones are NaN."""
    records = [r for r in records if r.acc_finetuned is not None]
    if len(records) < MIN_REPORT_RECORDS:
        raise UndefinedCorrelationError(
            f"{label}: need at least {MIN_REPORT_RECORDS} fine-tuned candidates, got {len(records)}"
        )
    y = [r.acc_finetuned for r in records]
    adaptive = [r.acc_adaptive for r in records]
    vanilla = [r.acc_vanilla for r in records]
    if any(v is None for v in adaptive):
        raise DataError(f"{label}: every candidate needs acc_adaptive")
    has_vanilla = all(v is not None for v in vanilla)

    values = {}
    for name, fn in COEFFICIENTS.items():
        values[f"{name}_adaptive"] = _safe(fn, adaptive, y, f"{label} {name} adaptive")
        values[f"{name}_vanilla"] = _safe(fn, vanilla, y, f"{label} {name} vanilla") if has_vanilla else math.nan
    return CorrelationReport(constraint=label, n=len(records), **values)


def group_by_constraint(records):
    groups = {}
    for r in records:
        groups.setdefault(r.constraint, []).append(r)
    return dict(sorted(groups.items(), key=lambda kv: constraint_sort_key(kv[0])))


def report_table(reports):
    """One row per constraint label, in display order."""
    reports = sorted(reports, key=lambda r: constraint_sort_key(r.constraint))
    return pd.DataFrame([r.to_row() for r in reports], columns=REPORT_COLUMNS)


def scatter_table(records):
    """(evaluated, fine-tuned) pairs per candidate and evaluation method, for plotting."""
    rows = []
    for r in records:
        if r.acc_finetuned is None:
            continue
        rows.append({"id": r.id, "constraint": r.constraint, "acc_evaluated": r.acc_adaptive,
                     "acc_finetuned": r.acc_finetuned, "method": "adaptive"})
        if r.acc_vanilla is not None:
            rows.append({"id": r.id, "constraint": r.constraint, "acc_evaluated": r.acc_vanilla,
                         "acc_finetuned": r.acc_finetuned, "method": "vanilla"})
    return pd.DataFrame(rows, columns=SCATTER_COLUMNS)


def evaluation_lift(records, low_threshold=0.3, bins=10):
    """How much adaptive BN lifts evaluated accuracy over vanilla evaluation.

    Args:
        records: CandidateRecords carrying both acc_adaptive and acc_vanilla
        low_threshold: accuracy below which a candidate counts as collapsed
        bins: histogram bins over [0, 1]

    Returns:
        dict with means, lift, per-method histogram counts and low-accuracy mass
    """
    pairs = [(r.acc_adaptive, r.acc_vanilla) for r in records
             if r.acc_adaptive is not None and r.acc_vanilla is not None]
    if not pairs:
        raise DataError("no candidates with both adaptive and vanilla accuracy")
    adaptive = np.array([p[0] for p in pairs])
    vanilla = np.array([p[1] for p in pairs])
    edges = np.linspace(0.0, 1.0, bins + 1)
    return {
        "n": len(pairs),
        "mean_adaptive": float(adaptive.mean()),
        "mean_vanilla": float(vanilla.mean()),
        "lift": float(adaptive.mean() - vanilla.mean()),
        "bin_edges": edges.tolist(),
        "hist_adaptive": np.histogram(adaptive, bins=edges)[0].tolist(),
        "hist_vanilla": np.histogram(vanilla, bins=edges)[0].tolist(),
        "low_mass_adaptive": float((adaptive < low_threshold).mean()),
        "low_mass_vanilla": float((vanilla < low_threshold).mean()),
    }


def topk_agreement(records, k, method="adaptive"):
    """Share of the top-k by evaluated accuracy that are also top-k after fine-tuning."""
    field_name = f"acc_{method}"
    usable = [r for r in records if r.acc_finetuned is not None and getattr(r, field_name) is not None]
    if k < 1 or len(usable) < k:
        raise DataError(f"top-{k} agreement needs at least {k} fine-tuned candidates, got {len(usable)}")
    by_eval = sorted(usable, key=lambda r: (-getattr(r, field_name), r.id))[:k]
    by_tuned = sorted(usable, key=lambda r: (-r.acc_finetuned, r.id))[:k]
    return len({r.id for r in by_eval} & {r.id for r in by_tuned}) / k
