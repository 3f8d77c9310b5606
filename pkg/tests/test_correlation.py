import math
from itertools import combinations

import numpy as np
import pytest

from modules.config import REPORT_COLUMNS, SCATTER_COLUMNS
from modules.correlation import (
    build_report,
    evaluation_lift,
    group_by_constraint,
    kendall,
    pearson,
    report_table,
    scatter_table,
    spearman,
    topk_agreement,
)
from modules.errors import DataError, UndefinedCorrelationError
from modules.pruner import PruningStrategy
from modules.search import CandidateRecord


# ---------------------------------------------------------------------------
# Brute-force references
# ---------------------------------------------------------------------------
def ref_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return cov / (sx * sy)


def ref_ranks(x):
    """1-based ranks, tied values share the mean of their positions."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def ref_kendall_b(x, y):
    concordant = discordant = tied_x = tied_y = 0
    for i, j in combinations(range(len(x)), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if dx == 0 and dy == 0:
            tied_x += 1
            tied_y += 1
        elif dx == 0:
            tied_x += 1
        elif dy == 0:
            tied_y += 1
        elif dx * dy > 0:
            concordant += 1
        else:
            discordant += 1
    total = len(x) * (len(x) - 1) // 2
    return (concordant - discordant) / math.sqrt((total - tied_x) * (total - tied_y))


def random_pairs(count=100, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < count:
        n = int(rng.integers(3, 51))
        if len(pairs) % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(x) > 0 and np.ptp(y) > 0:
            pairs.append((x.tolist(), y.tolist()))
    return pairs


def record(i, adaptive, vanilla, tuned, constraint="unconstrained"):
    return CandidateRecord(f"c{i:04d}", PruningStrategy((0.1,)), acc_adaptive=adaptive,
                           acc_vanilla=vanilla, acc_finetuned=tuned, constraint=constraint)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------
def test_worked_examples():
    x, y = [1, 2, 3, 4], [1, 3, 2, 4]
    assert pearson(x, y) == pytest.approx(0.8)
    assert spearman(x, y) == pytest.approx(0.8)
    assert kendall(x, y) == pytest.approx(4 / 6)


def test_tied_ranks():
    assert spearman([1, 1, 2], [3, 3, 4]) == pytest.approx(1.0)


@pytest.mark.parametrize("fn", [pearson, spearman, kendall])
def test_identity_and_reversal(fn):
    x = [0.1, 0.4, 0.2, 0.9, 0.7]
    assert fn(x, x) == pytest.approx(1.0)
    assert fn(x, [-v for v in x]) == pytest.approx(-1.0)


@pytest.mark.parametrize("fn,ref", [
    (pearson, ref_pearson),
    (spearman, lambda x, y: ref_pearson(ref_ranks(x), ref_ranks(y))),
    (kendall, ref_kendall_b),
])
def test_matches_brute_force_reference(fn, ref):
    for x, y in random_pairs():
        assert abs(fn(x, y) - ref(x, y)) <= 1e-12


@pytest.mark.parametrize("fn", [pearson, spearman, kendall])
def test_symmetric(fn):
    for x, y in random_pairs(20, seed=1):
        assert fn(x, y) == pytest.approx(fn(y, x), abs=1e-12)


def test_invariance_under_increasing_maps():
    rng = np.random.default_rng(3)
    for x, y in random_pairs(20, seed=2):
        x = np.array(x)
        a, b = rng.uniform(0.5, 3.0), rng.normal()
        assert pearson(a * x + b, y) == pytest.approx(pearson(x, y), abs=1e-10)
        # exp is strictly increasing, so ranks and pair orderings survive
        assert spearman(np.exp(x), y) == pytest.approx(spearman(x, y), abs=1e-12)
        assert kendall(np.exp(x), y) == pytest.approx(kendall(x, y), abs=1e-12)


@pytest.mark.parametrize("fn", [pearson, spearman, kendall])
@pytest.mark.parametrize("x,y", [
    ([1, 1, 1], [1, 2, 3]),
    ([1], [2]),
    ([1, 2], [1, 2, 3]),
    ([1, float("nan"), 3], [1, 2, 3]),
])
def test_undefined_inputs_raise(fn, x, y):
    with pytest.raises(UndefinedCorrelationError):
        fn(x, y)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
def test_report_for_perfect_adaptive_predictor():
    records = [record(i, a, v, a) for i, (a, v) in enumerate([(0.2, 0.5), (0.4, 0.1), (0.6, 0.3), (0.8, 0.2)])]
    report = build_report(records, "unconstrained")
    assert report.n == 4
    assert report.pearson_adaptive == pytest.approx(1.0)
    assert report.spearman_adaptive == pytest.approx(1.0)
    assert report.kendall_adaptive == pytest.approx(1.0)
    assert report.spearman_vanilla < 1.0


def test_report_needs_three_finetuned_records():
    records = [record(0, 0.1, 0.1, 0.2), record(1, 0.3, 0.2, 0.5), record(2, 0.4, 0.1, None)]
    with pytest.raises(UndefinedCorrelationError):
        build_report(records, "50%")


def test_constant_vanilla_column_becomes_nan():
    records = [record(i, 0.1 * i, 0.1, 0.2 * i) for i in range(1, 5)]
    report = build_report(records, "50%")
    assert math.isnan(report.pearson_vanilla)
    assert report.pearson_adaptive == pytest.approx(1.0)


def test_report_table_rows_follow_display_order():
    groups = {
        "50%": [record(i, 0.1 * i, 0.05 * i, 0.2 * i, "50%") for i in range(1, 5)],
        "unconstrained": [record(i, 0.1 * i, 0.05 * (5 - i), 0.2 * i) for i in range(1, 5)],
    }
    table = report_table([build_report(rs, label) for label, rs in groups.items()])
    assert list(table.columns) == REPORT_COLUMNS
    assert table["constraint"].tolist() == ["unconstrained", "50%"]
    assert table.loc[1, "kendall_vanilla"] == pytest.approx(1.0)
    assert table.loc[0, "kendall_vanilla"] == pytest.approx(-1.0)


def test_group_by_constraint_orders_labels():
    records = [record(0, 0.1, 0.1, 0.1, "50%"), record(1, 0.1, 0.1, 0.1, "40%"),
               record(2, 0.1, 0.1, 0.1, "unconstrained"), record(3, 0.1, 0.1, 0.1, "75%")]
    assert list(group_by_constraint(records)) == ["unconstrained", "75%", "50%", "40%"]


def test_scatter_has_one_row_per_method():
    records = [record(0, 0.5, 0.2, 0.6), record(1, 0.4, None, 0.5), record(2, 0.3, 0.1, None)]
    table = scatter_table(records)
    assert list(table.columns) == SCATTER_COLUMNS
    assert len(table) == 3
    assert table["method"].tolist() == ["adaptive", "vanilla", "adaptive"]


def test_evaluation_lift():
    records = [record(0, 0.8, 0.1, None), record(1, 0.6, 0.5, None), record(2, 0.7, 0.05, None)]
    lift = evaluation_lift(records, low_threshold=0.3, bins=10)
    assert lift["n"] == 3
    assert lift["lift"] == pytest.approx(0.7 - 0.65 / 3)
    assert lift["low_mass_vanilla"] == pytest.approx(2 / 3)
    assert lift["low_mass_adaptive"] == 0.0
    assert sum(lift["hist_adaptive"]) == 3
    with pytest.raises(DataError):
        evaluation_lift([record(0, 0.5, None, None)])


def test_topk_agreement():
    records = [record(0, 0.9, 0.1, 0.9), record(1, 0.8, 0.9, 0.1), record(2, 0.7, 0.8, 0.8), record(3, 0.1, 0.7, 0.2)]
    assert topk_agreement(records, 2, "adaptive") == 0.5
    assert topk_agreement(records, 2, "vanilla") == 0.5
    assert topk_agreement(records, 4) == 1.0
    with pytest.raises(DataError):
        topk_agreement(records, 5)
