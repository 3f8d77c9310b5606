"""
Filter ranking and structural pruning.

A PruningStrategy holds one ratio per prunable layer (in layer order). For a
layer with C_out filters, floor(r * C_out) of the lowest-norm filters are
removed; the layer's BN channels and the next weighted layer's input
channels follow. Depthwise convs inherit the channel set of the conv that
feeds them. The classifier output is never pruned.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from modules.batchnorm import select_channels
from modules.errors import PruningError
from modules.netgraph import LayerKind, ParamStore, check_params, count_flops, count_params

logger = logging.getLogger(__name__)


class ImportanceCriterion(str, Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class PruningStrategy:
    ratios: tuple
    realized_flops_ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        for r in self.ratios:
            if not 0.0 <= r < 1.0:
                raise PruningError(f"pruning ratio {r} outside [0, 1)")

    def __len__(self):
        return len(self.ratios)

    def to_dict(self):
        return {"ratios": list(self.ratios), "realized_flops_ratio": self.realized_flops_ratio}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["ratios"]), float(d.get("realized_flops_ratio", 1.0)))


@dataclass
class PrunedModel:
    spec: object
    params: ParamStore
    kept: dict = field(default_factory=dict)
    coupled: list = field(default_factory=list)

    def __iter__(self):
        # allows `spec, params = apply_strategy(...)`
        yield self.spec
        yield self.params


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------
def filter_norms(weights, criterion=ImportanceCriterion.L1):
    """Per-filter norm over the full kernel (all axes but the first)."""
    flat = weights.reshape(weights.shape[0], -1).astype(np.float64)
    if ImportanceCriterion(criterion) == ImportanceCriterion.L2:
        return np.sqrt((flat ** 2).sum(axis=1))
    return np.abs(flat).sum(axis=1)


def rank_filters(spec, params, layer_index, criterion=ImportanceCriterion.L1):
    """Filter indices ordered least important first; ties keep the lower index first."""
    if not 0 <= layer_index < len(spec.layers) or not spec.layers[layer_index].prunable:
        raise PruningError(f"layer {layer_index} is not prunable")
    norms = filter_norms(params.weights[layer_index], criterion)
    return np.argsort(norms, kind="stable")


# ---------------------------------------------------------------------------
# Strategy arithmetic
# ---------------------------------------------------------------------------
def removed_count(ratio, out_channels):
    return int(math.floor(ratio * out_channels))


def _check_strategy(spec, strategy):
    prunable = spec.prunable_indices
    if not prunable:
        raise PruningError("network has no prunable layers")
    if len(strategy) != len(prunable):
        raise PruningError(f"strategy has {len(strategy)} ratios, network has {len(prunable)} prunable layers")
    return prunable


def kept_counts(spec, strategy):
    """{layer index: filters kept} for every prunable layer."""
    counts = {}
    for i, r in zip(_check_strategy(spec, strategy), strategy.ratios):
        c = spec.layers[i].out_channels
        keep = c - removed_count(r, c)
        if keep < 1:
            raise PruningError(f"ratio {r} would empty layer {i} ({c} filters)")
        counts[i] = keep
    return counts


def pruned_spec(spec, strategy):
    """The pruned NetworkSpec, computed from shapes alone."""
    return spec.with_out_channels(kept_counts(spec, strategy))


def strategy_flops_ratio(spec, strategy):
    return count_flops(pruned_spec(spec, strategy)).total / count_flops(spec).total


def strategy_params_ratio(spec, strategy):
    return count_params(pruned_spec(spec, strategy)).total / count_params(spec).total


def make_strategy(spec, ratios):
    """PruningStrategy with its realized FLOPs ratio filled in."""
    draft = PruningStrategy(tuple(ratios))
    return PruningStrategy(draft.ratios, strategy_flops_ratio(spec, draft))


def uniform_strategy(spec, ratio):
    return make_strategy(spec, [ratio] * len(spec.prunable_indices))


# ---------------------------------------------------------------------------
# Surgery
# ---------------------------------------------------------------------------
def _fc_input_columns(channels, in_shape):
    """Flattened feature columns belonging to the given input channels."""
    if len(in_shape) == 1:
        return channels
    block = in_shape[1] * in_shape[2]
    return (channels[:, None] * block + np.arange(block)[None, :]).ravel()


def apply_strategy(spec, params, strategy, criterion=ImportanceCriterion.L1):
    """Remove the lowest-ranked filters; return a PrunedModel that owns its arrays."""
    counts = kept_counts(spec, strategy)
    shapes = spec.infer_shapes()
    out = ParamStore()
    kept, coupled = {}, []
    carry = None  # surviving channel indices of the current activation

    for i, layer in enumerate(spec.layers):
        in_shape = shapes[i][0]
        kind = layer.kind
        if kind == LayerKind.CONV:
            w = params.weights[i]
            if carry is not None:
                w = w[:, carry]
            carry = None
            if layer.prunable:
                order = rank_filters(spec, params, i, criterion)
                carry = np.sort(order[layer.out_channels - counts[i]:])
                kept[i] = carry
                w = w[carry]
            out.weights[i] = np.array(w)
        elif kind == LayerKind.DEPTHWISE_CONV:
            w = params.weights[i]
            if carry is not None:
                w = w[carry]
                coupled.append(i)
            out.weights[i] = np.array(w)
        elif kind == LayerKind.FC:
            w = params.weights[i]
            if carry is not None:
                w = w[:, _fc_input_columns(carry, in_shape)]
            carry = None
            b = params.biases.get(i)
            if layer.prunable:
                order = rank_filters(spec, params, i, criterion)
                carry = np.sort(order[layer.out_channels - counts[i]:])
                kept[i] = carry
                w = w[carry]
                b = None if b is None else b[carry]
            out.weights[i] = np.array(w)
            if b is not None:
                out.biases[i] = np.array(b)
        elif kind == LayerKind.BATCHNORM:
            state = params.bn[i]
            out.bn[i] = select_channels(state, carry) if carry is not None else state.copy()

    new_spec = spec.with_out_channels(counts)
    check_params(new_spec, out)
    logger.debug("pruned %s -> %s", [spec.layers[i].out_channels for i in counts], list(counts.values()))
    return PrunedModel(new_spec, out, kept, coupled)
