import re

from modules.config import CONSTRAINT_ORDER

BASELINE_ID = "baseline"


def candidate_id(index):
    return f"c{index:04d}"


def constraint_label(target):
    """Row label for a FLOPs target: None -> 'unconstrained', 0.625 -> '62.5%'."""
    if target is None:
        return "unconstrained"
    return f"{round(target * 100, 4):g}%"


def constraint_sort_key(label):
    if label in CONSTRAINT_ORDER:
        return (CONSTRAINT_ORDER[label], 0.0)
    # unknown labels after the known ones, larger targets first
    m = re.fullmatch(r"([\d.]+)%", label)
    return (len(CONSTRAINT_ORDER), -float(m.group(1)) if m else 0.0)


def short_strategy(strategy, digits=2):
    """Compact strategy text for status lines, e.g. '0.12/0.50/0.33'."""
    return "/".join(f"{r:.{digits}f}" for r in strategy.ratios)
