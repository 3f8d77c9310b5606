"""
Sequential layer graphs: specs, parameter storage, forward/backward, and
FLOPs / parameter accounting.

A NetworkSpec is an immutable list of LayerSpecs. Channel counts of BN,
pooling and depthwise layers are inferred from their input, so pruning only
has to rewrite `out_channels` of Conv and FC layers.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from modules import tensor as K
from modules.batchnorm import BNMode, BNState, bn_backward, bn_forward
from modules.config import get_dtype
from modules.errors import LayerError, NumericError, ShapeError

logger = logging.getLogger(__name__)


class LayerKind(str, Enum):
    CONV = "conv"
    DEPTHWISE_CONV = "depthwise_conv"
    FC = "fc"
    RELU = "relu"
    MAXPOOL = "maxpool"
    GLOBAL_AVGPOOL = "global_avgpool"
    BATCHNORM = "batchnorm"


WEIGHTED_KINDS = (LayerKind.CONV, LayerKind.DEPTHWISE_CONV, LayerKind.FC)
CLASSIFIER_INIT_SCALE = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    out_channels: Optional[int] = None
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    prunable: bool = False
    bias: bool = False
    name: str = ""

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return {k: v for k, v in d.items() if v not in (None, "")}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kind"] = LayerKind(d["kind"])
        return cls(**d)


# Shorthand constructors used by the architecture builders and tests
def conv(out_channels, kernel_size=3, stride=1, padding=1, prunable=True, name=""):
    return LayerSpec(LayerKind.CONV, out_channels, kernel_size, stride, padding, prunable, False, name)


def depthwise(kernel_size=3, stride=1, padding=1, name=""):
    return LayerSpec(LayerKind.DEPTHWISE_CONV, None, kernel_size, stride, padding, False, False, name)


def fc(out_features, prunable=False, bias=False, name=""):
    return LayerSpec(LayerKind.FC, out_features, prunable=prunable, bias=bias, name=name)


def bn(name=""):
    return LayerSpec(LayerKind.BATCHNORM, name=name)


def relu():
    return LayerSpec(LayerKind.RELU)


def maxpool():
    return LayerSpec(LayerKind.MAXPOOL)


def gap():
    return LayerSpec(LayerKind.GLOBAL_AVGPOOL)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.infer_shapes()
        self._check_structure()

    def _check_structure(self):
        last = self.layers[-1] if self.layers else None
        if last is None or last.kind != LayerKind.FC:
            raise ShapeError("the final layer must be an FC classifier")
        if last.out_channels != self.class_count:
            raise ShapeError(f"classifier has {last.out_channels} outputs, class_count is {self.class_count}")
        if last.prunable:
            raise ShapeError("the classifier output dimension is never prunable")
        for i, layer in enumerate(self.layers[:-1]):
            if layer.kind in WEIGHTED_KINDS and self.layers[i + 1].kind != LayerKind.BATCHNORM:
                raise ShapeError(f"layer {i} ({layer.kind.value}) must be followed by BatchNorm")
            if layer.prunable and layer.kind not in (LayerKind.CONV, LayerKind.FC):
                raise ShapeError(f"layer {i} ({layer.kind.value}) cannot be prunable")

    def infer_shapes(self):
        """Per-layer (input_shape, output_shape) pairs, batch axis excluded."""
        shapes = []
        current = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                out = _infer_layer(layer, current)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind.value}): {e}") from e
            shapes.append((current, out))
            current = out
        return shapes

    @property
    def prunable_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    @property
    def weighted_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED_KINDS]

    @property
    def bn_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == LayerKind.BATCHNORM]

    def with_out_channels(self, mapping):
        """Copy of the spec with out_channels replaced for the given layer indices."""
        layers = list(self.layers)
        for i, c in mapping.items():
            layers[i] = replace(layers[i], out_channels=int(c))
        return NetworkSpec(tuple(layers), self.input_shape, self.class_count)

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            class_count=int(d["class_count"]),
        )


def _infer_layer(layer, shape):
    kind = layer.kind
    if kind in (LayerKind.CONV, LayerKind.DEPTHWISE_CONV, LayerKind.MAXPOOL, LayerKind.GLOBAL_AVGPOOL):
        if len(shape) != 3:
            raise ShapeError(f"expects a C,H,W input, got {shape}")
        c, h, w = shape
    if kind == LayerKind.CONV:
        if not layer.out_channels or layer.out_channels < 1:
            raise ShapeError("conv needs out_channels >= 1")
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        return (layer.out_channels, K.output_size(h, k, s, p), K.output_size(w, k, s, p))
    if kind == LayerKind.DEPTHWISE_CONV:
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        return (c, K.output_size(h, k, s, p), K.output_size(w, k, s, p))
    if kind == LayerKind.FC:
        if not layer.out_channels or layer.out_channels < 1:
            raise ShapeError("fc needs out_channels >= 1")
        return (layer.out_channels,)
    if kind == LayerKind.MAXPOOL:
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2x2 needs extents >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)
    if kind == LayerKind.GLOBAL_AVGPOOL:
        return (c,)
    if kind in (LayerKind.RELU, LayerKind.BATCHNORM):
        if len(shape) not in (1, 3):
            raise ShapeError(f"unsupported input {shape}")
        return shape
    raise ShapeError(f"unknown layer kind {kind}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------
@dataclass
class ParamStore:
    weights: dict = field(default_factory=dict)
    biases: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)

    def copy(self):
        return ParamStore(
            weights={i: w.copy() for i, w in self.weights.items()},
            biases={i: b.copy() for i, b in self.biases.items()},
            bn={i: s.copy() for i, s in self.bn.items()},
        )

    def named_parameters(self):
        """(key, array) for every learnable array, in layer order."""
        out = []
        for i in sorted(set(self.weights) | set(self.biases) | set(self.bn)):
            if i in self.weights:
                out.append((f"{i}.weight", self.weights[i]))
            if i in self.biases:
                out.append((f"{i}.bias", self.biases[i]))
            if i in self.bn:
                out.append((f"{i}.gamma", self.bn[i].gamma))
                out.append((f"{i}.beta", self.bn[i].beta))
        return out

    def set_bn_mode(self, mode):
        for state in self.bn.values():
            state.mode = BNMode(mode)

    @property
    def dtype(self):
        for w in self.weights.values():
            return w.dtype
        return get_dtype()


def weight_shape(layer, in_shape):
    if layer.kind == LayerKind.CONV:
        return (layer.out_channels, in_shape[0], layer.kernel_size, layer.kernel_size)
    if layer.kind == LayerKind.DEPTHWISE_CONV:
        return (in_shape[0], 1, layer.kernel_size, layer.kernel_size)
    if layer.kind == LayerKind.FC:
        return (layer.out_channels, math.prod(in_shape))
    raise LayerError(f"{layer.kind.value} layers have no weights")


def check_params(spec, params):
    """Raise ShapeError unless every tensor matches its owning LayerSpec."""
    for i, (in_shape, out_shape) in enumerate(spec.infer_shapes()):
        layer = spec.layers[i]
        if layer.kind in WEIGHTED_KINDS:
            expected = weight_shape(layer, in_shape)
            got = params.weights.get(i)
            if got is None or got.shape != expected:
                raise ShapeError(f"layer {i}: weight shape {None if got is None else got.shape} != {expected}")
            if layer.bias and (i not in params.biases or params.biases[i].shape != (layer.out_channels,)):
                raise ShapeError(f"layer {i}: missing or misshaped bias")
        if layer.kind == LayerKind.BATCHNORM:
            state = params.bn.get(i)
            if state is None or state.channels != out_shape[0]:
                raise ShapeError(f"layer {i}: BN state does not have {out_shape[0]} channels")


def init_params(spec, seed=0, dtype=None):
    """Kaiming-uniform weights, zero biases, gamma=1, beta=0.

    The classifier bound is scaled by CLASSIFIER_INIT_SCALE so fresh logits sit
    near zero and the first loss is close to ln(class_count).
    """
    dtype = dtype or get_dtype()
    rng = np.random.default_rng(seed)
    params = ParamStore()
    for i, (in_shape, out_shape) in enumerate(spec.infer_shapes()):
        layer = spec.layers[i]
        if layer.kind in WEIGHTED_KINDS:
            shape = weight_shape(layer, in_shape)
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            if i == len(spec.layers) - 1:
                bound *= CLASSIFIER_INIT_SCALE
            params.weights[i] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            if layer.bias:
                params.biases[i] = np.zeros(layer.out_channels, dtype=dtype)
        elif layer.kind == LayerKind.BATCHNORM:
            params.bn[i] = BNState.fresh(out_shape[0], dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------
def _layer_forward(i, layer, params, x):
    kind = layer.kind
    if kind == LayerKind.CONV:
        return K.conv2d_forward(x, params.weights[i], layer.stride, layer.padding), None
    if kind == LayerKind.DEPTHWISE_CONV:
        return K.depthwise_conv2d_forward(x, params.weights[i], layer.stride, layer.padding), None
    if kind == LayerKind.FC:
        return K.fc_forward(x, params.weights[i], params.biases.get(i)), None
    if kind == LayerKind.RELU:
        return K.relu_forward(x), None
    if kind == LayerKind.MAXPOOL:
        return K.maxpool2x2_forward(x), None
    if kind == LayerKind.GLOBAL_AVGPOOL:
        return K.global_avgpool_forward(x), None
    if kind == LayerKind.BATCHNORM:
        return bn_forward(params.bn[i], x)
    raise LayerError(f"unknown layer kind {kind}")


def _run(spec, params, x, bn_mode, tape=None, observer=None):
    expected = spec.input_shape
    if tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input shape {tuple(x.shape[1:])} != spec input shape {expected}")
    params.set_bn_mode(bn_mode)
    for i, layer in enumerate(spec.layers):
        try:
            out, cache = _layer_forward(i, layer, params, x)
        except NumericError as e:
            raise NumericError(f"layer {i} ({layer.kind.value}): {e}") from e
        if tape is not None:
            tape.append((x, cache))
        if observer is not None:
            observer(i, layer, x, out)
        x = out
    return x


def forward(spec, params, x, bn_mode=BNMode.EVAL, observer=None):
    """Logits N,class_count. bn_mode is applied to every BN layer."""
    return _run(spec, params, x, BNMode(bn_mode), observer=observer)


def forward_train(spec, params, x):
    """TRAIN-mode forward that also returns the tape backward() needs."""
    tape = []
    logits = _run(spec, params, x, BNMode.TRAIN, tape=tape)
    return logits, tape


def backward(spec, params, tape, grad_logits):
    """Gradients keyed like ParamStore.named_parameters()."""
    grads = {}
    grad = grad_logits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        x, cache = tape[i]
        try:
            grad = _layer_backward(i, layer, params, grad, x, cache, grads)
        except NumericError as e:
            raise NumericError(f"layer {i} ({layer.kind.value}) backward: {e}") from e
    return grads


def _layer_backward(i, layer, params, grad, x, cache, grads):
    """Gradient w.r.t. the layer input; parameter gradients go into grads."""
    kind = layer.kind
    if kind == LayerKind.CONV:
        grad, grads[f"{i}.weight"] = K.conv2d_backward(grad, x, params.weights[i], layer.stride, layer.padding)
    elif kind == LayerKind.DEPTHWISE_CONV:
        grad, grads[f"{i}.weight"] = K.depthwise_conv2d_backward(
            grad, x, params.weights[i], layer.stride, layer.padding
        )
    elif kind == LayerKind.FC:
        grad, gw, gb = K.fc_backward(grad, x, params.weights[i], has_bias=i in params.biases)
        grads[f"{i}.weight"] = gw
        if gb is not None:
            grads[f"{i}.bias"] = gb
    elif kind == LayerKind.RELU:
        grad = K.relu_backward(grad, x)
    elif kind == LayerKind.MAXPOOL:
        grad = K.maxpool2x2_backward(grad, x)
    elif kind == LayerKind.GLOBAL_AVGPOOL:
        grad = K.global_avgpool_backward(grad, x)
    elif kind == LayerKind.BATCHNORM:
        grad, grads[f"{i}.gamma"], grads[f"{i}.beta"] = bn_backward(params.bn[i], grad, cache)
    return grad


def first_nonfinite_layer(spec, tape, logits):
    """Index of the first layer whose output holds NaN/Inf, or None."""
    outputs = [x for x, _ in tape[1:]] + [logits]
    for i, out in enumerate(outputs):
        if not np.all(np.isfinite(out)):
            return i
    return None


def raise_if_nonfinite(spec, tape, logits, epoch, batch):
    layer = first_nonfinite_layer(spec, tape, logits)
    if layer is not None:
        raise NumericError(
            f"non-finite loss at epoch {epoch}, batch {batch}; first NaN/Inf in layer {layer} "
            f"({spec.layers[layer].kind.value})"
        )


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CountReport:
    per_layer: tuple
    total: int


def count_flops(spec):
    """Multiply-accumulates per layer (1 FLOP = 1 MAC); BN/ReLU/pooling count zero."""
    per_layer = []
    for layer, (in_shape, out_shape) in zip(spec.layers, spec.infer_shapes()):
        k2 = layer.kernel_size ** 2
        if layer.kind == LayerKind.CONV:
            macs = out_shape[0] * in_shape[0] * k2 * out_shape[1] * out_shape[2]
        elif layer.kind == LayerKind.DEPTHWISE_CONV:
            macs = out_shape[0] * k2 * out_shape[1] * out_shape[2]
        elif layer.kind == LayerKind.FC:
            macs = math.prod(in_shape) * out_shape[0]
        else:
            macs = 0
        per_layer.append(int(macs))
    return CountReport(tuple(per_layer), sum(per_layer))


def count_params(spec):
    """Learnable parameters per layer: weights, FC bias, BN gamma and beta."""
    per_layer = []
    for layer, (in_shape, out_shape) in zip(spec.layers, spec.infer_shapes()):
        if layer.kind in WEIGHTED_KINDS:
            n = math.prod(weight_shape(layer, in_shape))
            if layer.bias:
                n += layer.out_channels
        elif layer.kind == LayerKind.BATCHNORM:
            n = 2 * out_shape[0]
        else:
            n = 0
        per_layer.append(int(n))
    return CountReport(tuple(per_layer), sum(per_layer))


def weight_histogram(params, layer_index, bin_edges):
    """Counts of |w| per bin for one weighted layer."""
    if layer_index not in params.weights:
        raise LayerError(f"layer {layer_index} has no weights")
    counts, _ = np.histogram(np.abs(params.weights[layer_index]), bins=np.asarray(bin_edges))
    return counts


# ---------------------------------------------------------------------------
# Built-in architectures
# ---------------------------------------------------------------------------
DEFAULT_WIDTHS = {
    "micro-cnn": (16, 16, 16),
    "micro-mobilenet": (16, 32, 32, 64, 64),
}


def _scale(widths, width_mult):
    return [max(1, int(round(w * width_mult))) for w in widths]


def micro_cnn(input_shape, class_count, widths=None, width_mult=1.0):
    """(Conv-BN-ReLU-MaxPool) per width, global average pool, FC classifier."""
    layers = []
    for i, w in enumerate(_scale(widths or DEFAULT_WIDTHS["micro-cnn"], width_mult)):
        layers += [conv(w, name=f"conv{i + 1}"), bn(), relu(), maxpool()]
    layers += [gap(), fc(class_count, bias=True, name="classifier")]
    return NetworkSpec(tuple(layers), input_shape, class_count)


def micro_mobilenet(input_shape, class_count, widths=None, width_mult=1.0):
    """Conv stem then depthwise-separable blocks; pooling after blocks 1 and 3."""
    widths = _scale(widths or DEFAULT_WIDTHS["micro-mobilenet"], width_mult)
    if len(widths) < 2:
        raise ShapeError("micro-mobilenet needs a stem width and at least one block width")
    layers = [conv(widths[0], name="stem"), bn(), relu(), maxpool()]
    for b, w in enumerate(widths[1:]):
        layers += [
            depthwise(name=f"block{b + 1}.dw"), bn(), relu(),
            conv(w, kernel_size=1, padding=0, name=f"block{b + 1}.pw"), bn(), relu(),
        ]
        if b in (0, 2):
            layers.append(maxpool())
    layers += [gap(), fc(class_count, bias=True, name="classifier")]
    return NetworkSpec(tuple(layers), input_shape, class_count)


BUILDERS = {
    "micro-cnn": micro_cnn,
    "micro-mobilenet": micro_mobilenet,
}


def build_architecture(name, input_shape, class_count, widths=None, width_mult=1.0):
    if name not in BUILDERS:
        raise LayerError(f"unknown architecture {name!r}; choose from {sorted(BUILDERS)}")
    return BUILDERS[name](tuple(input_shape), class_count, widths, width_mult)
