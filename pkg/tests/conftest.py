import os

import numpy as np
import pytest

from modules import netgraph as ng
from modules.data import DatasetSplit, synth_blobs

os.environ.setdefault("EAGLE_CHECK_FINITE", "1")

FD_EPS = 1e-4


def numeric_grad(f, x, eps=FD_EPS):
    """Central differences of the scalar f() w.r.t. every entry of x (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a, b):
    """Norm-wise relative error."""
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def two_class_blobs():
    train = synth_blobs(2, 60, 8, seed=1)
    test = synth_blobs(2, 20, 8, seed=2, role="test")
    return train, test


def positional_spec(input_shape=(1, 8, 8), classes=2, width=4, hidden=8):
    """Conv-BN-ReLU-MaxPool, a prunable hidden FC, then the classifier."""
    layers = (
        ng.conv(width), ng.bn(), ng.relu(), ng.maxpool(),
        ng.fc(hidden, prunable=True), ng.bn(), ng.relu(),
        ng.fc(classes, bias=True),
    )
    return ng.NetworkSpec(layers, input_shape, classes)


@pytest.fixture
def small_spec():
    return positional_spec()


@pytest.fixture
def tiny_split(rng):
    images = rng.normal(size=(24, 1, 8, 8)).astype(np.float32)
    labels = np.arange(24) % 2
    return DatasetSplit(images, labels, "train", 2)
