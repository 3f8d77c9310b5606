import math

import numpy as np
import pytest

from modules import netgraph as ng
from modules.batchnorm import BNMode
from modules.errors import LayerError, ShapeError
from modules.tensor import softmax_cross_entropy
from tests.conftest import numeric_grad, positional_spec, rel_error


def observed_macs(spec, params, x):
    """MACs recomputed from the tensors a forward pass actually sees."""
    macs = []

    def observer(i, layer, inp, out):
        if layer.kind == ng.LayerKind.CONV:
            k = layer.kernel_size
            macs.append(out[0].size * inp.shape[1] * k * k)
        elif layer.kind == ng.LayerKind.DEPTHWISE_CONV:
            macs.append(out[0].size * layer.kernel_size ** 2)
        elif layer.kind == ng.LayerKind.FC:
            macs.append(inp[0].size * out.shape[1])
        else:
            macs.append(0)

    ng.forward(spec, params, x, observer=observer)
    return macs


def test_micro_cnn_shapes():
    spec = ng.build_architecture("micro-cnn", (1, 28, 28), 10)
    shapes = spec.infer_shapes()
    assert shapes[0] == ((1, 28, 28), (16, 28, 28))
    assert shapes[-1][1] == (10,)
    assert len(spec.prunable_indices) == 3


def test_micro_mobilenet_shapes_and_prunable_layers():
    spec = ng.build_architecture("micro-mobilenet", (3, 32, 32), 10)
    kinds = [layer.kind for layer in spec.layers]
    assert ng.LayerKind.DEPTHWISE_CONV in kinds
    assert all(spec.layers[i].kind == ng.LayerKind.CONV for i in spec.prunable_indices)
    assert spec.infer_shapes()[-1][1] == (10,)


def test_width_mult_scales_widths():
    spec = ng.build_architecture("micro-cnn", (1, 16, 16), 10, width_mult=0.5)
    assert [spec.layers[i].out_channels for i in spec.prunable_indices] == [8, 8, 8]


def test_unknown_architecture():
    with pytest.raises(LayerError):
        ng.build_architecture("resnet", (1, 8, 8), 10)


@pytest.mark.parametrize("name,shape", [("micro-cnn", (1, 16, 16)), ("micro-mobilenet", (3, 16, 16))])
def test_count_flops_matches_observed_forward(name, shape, rng):
    spec = ng.build_architecture(name, shape, 10)
    params = ng.init_params(spec, seed=0)
    x = rng.normal(size=(2, *shape)).astype(params.dtype)
    report = ng.count_flops(spec)
    assert list(report.per_layer) == observed_macs(spec, params, x)
    assert report.total == sum(report.per_layer)


def test_count_flops_single_conv_by_hand():
    spec = ng.NetworkSpec((ng.conv(4, kernel_size=3, padding=1), ng.bn(), ng.gap(), ng.fc(2)), (2, 5, 5), 2)
    assert ng.count_flops(spec).total == 4 * 2 * 9 * 25 + 4 * 2


def test_count_params_by_hand():
    spec = ng.NetworkSpec((ng.conv(4), ng.bn(), ng.gap(), ng.fc(3, bias=True)), (2, 6, 6), 3)
    assert ng.count_params(spec).total == 4 * 2 * 9 + 2 * 4 + 4 * 3 + 3


def test_weighted_layer_must_be_followed_by_bn():
    with pytest.raises(ShapeError):
        ng.NetworkSpec((ng.conv(4), ng.relu(), ng.gap(), ng.fc(2)), (1, 8, 8), 2)


def test_classifier_must_match_class_count_and_not_be_prunable():
    with pytest.raises(ShapeError):
        ng.NetworkSpec((ng.conv(4), ng.bn(), ng.gap(), ng.fc(3)), (1, 8, 8), 2)
    with pytest.raises(ShapeError):
        ng.NetworkSpec((ng.conv(4), ng.bn(), ng.gap(), ng.fc(2, prunable=True)), (1, 8, 8), 2)


def test_single_fc_network_is_valid():
    spec = ng.NetworkSpec((ng.fc(3),), (4,), 3)
    assert spec.prunable_indices == []


def test_forward_rejects_wrong_input_shape(small_spec):
    params = ng.init_params(small_spec, seed=0)
    with pytest.raises(ShapeError):
        ng.forward(small_spec, params, np.zeros((2, 1, 6, 6), dtype=params.dtype))


def test_check_params_detects_mismatch(small_spec):
    params = ng.init_params(small_spec, seed=0)
    params.weights[0] = params.weights[0][:2]
    with pytest.raises(ShapeError):
        ng.check_params(small_spec, params)


def test_spec_dict_roundtrip():
    spec = ng.build_architecture("micro-mobilenet", (1, 16, 16), 10)
    assert ng.NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_params_is_seeded(small_spec):
    a = ng.init_params(small_spec, seed=3)
    b = ng.init_params(small_spec, seed=3)
    for (ka, va), (kb, vb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)


def test_eval_forward_does_not_touch_params(small_spec, rng):
    params = ng.init_params(small_spec, seed=0)
    before = params.copy()
    ng.forward(small_spec, params, rng.normal(size=(3, 1, 8, 8)).astype(params.dtype), BNMode.EVAL)
    for i, state in params.bn.items():
        np.testing.assert_array_equal(state.moving_mean, before.bn[i].moving_mean)
        np.testing.assert_array_equal(state.moving_var, before.bn[i].moving_var)


def smooth_spec():
    """Conv-BN-GAP-FC(hidden)-BN-FC: no ReLU or max-pool kinks."""
    layers = (ng.conv(3), ng.bn(), ng.gap(), ng.fc(4, prunable=True), ng.bn(), ng.fc(2, bias=True))
    return ng.NetworkSpec(layers, (2, 5, 5), 2)


@pytest.mark.parametrize("seed", range(3))
def test_network_backward_matches_finite_differences(seed):
    spec = smooth_spec()
    params = ng.init_params(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for state in params.bn.values():
        state.gamma[:] = rng.uniform(0.5, 1.5, state.channels)
        state.beta[:] = rng.normal(size=state.channels)
    x = rng.normal(size=(6, 2, 5, 5))
    labels = rng.integers(0, 2, size=6)

    def loss():
        logits = ng.forward(spec, params.copy(), x, BNMode.TRAIN)
        return softmax_cross_entropy(logits, labels)[0]

    logits, tape = ng.forward_train(spec, params, x)
    _, grad = softmax_cross_entropy(logits, labels)
    grads = ng.backward(spec, params, tape, grad)

    named = dict(params.named_parameters())
    assert set(grads) == set(named)
    for key, arr in named.items():
        assert rel_error(grads[key], numeric_grad(loss, arr)) < 1e-6, key


def test_backward_on_positional_spec_covers_every_parameter(rng):
    spec = positional_spec()
    params = ng.init_params(spec, seed=0, dtype=np.float64)
    logits, tape = ng.forward_train(spec, params, rng.normal(size=(4, 1, 8, 8)))
    _, grad = softmax_cross_entropy(logits, np.array([0, 1, 0, 1]))
    grads = ng.backward(spec, params, tape, grad)
    for key, arr in params.named_parameters():
        assert grads[key].shape == arr.shape


def test_weight_histogram_counts_every_weight(small_spec):
    params = ng.init_params(small_spec, seed=0)
    top = float(np.abs(params.weights[0]).max())
    counts = ng.weight_histogram(params, 0, np.linspace(0, top, 6))
    assert counts.sum() == params.weights[0].size
    with pytest.raises(LayerError):
        ng.weight_histogram(params, 1, np.linspace(0, 1, 3))


def test_kaiming_bound(small_spec):
    params = ng.init_params(small_spec, seed=0)
    fan_in = 1 * 3 * 3
    assert np.abs(params.weights[0]).max() <= math.sqrt(6.0 / fan_in) + 1e-6


def test_classifier_starts_small(small_spec):
    params = ng.init_params(small_spec, seed=0)
    last = len(small_spec.layers) - 1
    fan_in = params.weights[last].shape[1]
    bound = ng.CLASSIFIER_INIT_SCALE * math.sqrt(6.0 / fan_in)
    assert np.abs(params.weights[last]).max() <= bound + 1e-6
