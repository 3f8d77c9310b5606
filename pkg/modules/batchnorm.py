"""
Batch normalization with explicit, separately controlled statistics.

    y = gamma * (x - mu) / sqrt(var + eps) + beta

Batch statistics use the unbiased 1/(n-1) variance over the per-channel
population (N for N,C inputs, N*H*W for N,C,H,W inputs). Moving statistics
follow mu_t = m * mu_{t-1} + (1 - m) * mu_B, and the same for the variance.

Modes:
    TRAIN        batch statistics, moving stats updated, gradients flow
    EVAL         moving statistics, nothing mutated
    RECALIBRATE  batch statistics, moving stats updated, gamma/beta frozen and
                 no backward pass allowed (adaptive BN)
"""
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from modules.errors import ModeError, ShapeError

DEFAULT_EPSILON = 1e-5
DEFAULT_MOMENTUM = 0.9


class BNMode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"
    RECALIBRATE = "recalibrate"


class RecalibrationRule(str, Enum):
    MOMENTUM = "momentum"
    CUMULATIVE = "cumulative"


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    momentum: float = DEFAULT_MOMENTUM
    mode: BNMode = BNMode.EVAL
    recalib_momentum: float = DEFAULT_MOMENTUM
    recalib_rule: RecalibrationRule = RecalibrationRule.MOMENTUM
    recalib_steps: int = field(default=0)

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "moving_mean", "moving_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"BN {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if not 0 <= self.momentum < 1 or not 0 <= self.recalib_momentum < 1:
            raise ValueError("BN momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, channels, dtype=np.float32, **kwargs):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            moving_mean=np.zeros(channels, dtype=dtype),
            moving_var=np.ones(channels, dtype=dtype),
            **kwargs,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def copy(self):
        return replace(
            self,
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            moving_mean=self.moving_mean.copy(),
            moving_var=self.moving_var.copy(),
        )


@dataclass
class BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    axes: tuple
    population: int


def select_channels(state, indices):
    """New BNState restricted to the given channel indices."""
    idx = np.asarray(indices, dtype=np.intp)
    return replace(
        state,
        gamma=state.gamma[idx].copy(),
        beta=state.beta[idx].copy(),
        moving_mean=state.moving_mean[idx].copy(),
        moving_var=state.moving_var[idx].copy(),
    )


def _layout(state, x):
    if x.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, shape = (0,), (1, -1)
    else:
        raise ShapeError(f"BN input must be N,C or N,C,H,W, got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"BN has {state.channels} channels, input has {x.shape[1]}")
    population = x.size // x.shape[1]
    return axes, shape, population


def batch_statistics(x, axes):
    """Per-channel mean and unbiased variance."""
    mean = x.mean(axis=axes)
    var = x.var(axis=axes, ddof=1)
    return mean, var


def _update_moving(state, mean, var, momentum):
    state.moving_mean[...] = momentum * state.moving_mean + (1 - momentum) * mean
    state.moving_var[...] = momentum * state.moving_var + (1 - momentum) * var


def _update_cumulative(state, mean, var):
    state.recalib_steps += 1
    k = state.recalib_steps
    state.moving_mean[...] = state.moving_mean + (mean - state.moving_mean) / k
    state.moving_var[...] = state.moving_var + (var - state.moving_var) / k


def bn_forward(state, x):
    """Return (output, cache); cache is only produced in TRAIN mode."""
    axes, shape, population = _layout(state, x)
    gamma = state.gamma.reshape(shape)
    beta = state.beta.reshape(shape)

    if state.mode == BNMode.EVAL:
        inv_std = 1.0 / np.sqrt(state.moving_var + state.epsilon)
        x_hat = (x - state.moving_mean.reshape(shape)) * inv_std.reshape(shape)
        return gamma * x_hat + beta, None

    if population < 2:
        raise ShapeError(
            f"BN in {state.mode.value} mode needs a per-channel population >= 2, got {population}"
        )
    mean, var = batch_statistics(x, axes)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma * x_hat + beta

    if state.mode == BNMode.TRAIN:
        _update_moving(state, mean, var, state.momentum)
        return out, BNCache(x_hat=x_hat, inv_std=inv_std, axes=axes, population=population)

    if state.recalib_rule == RecalibrationRule.CUMULATIVE:
        _update_cumulative(state, mean, var)
    else:
        _update_moving(state, mean, var, state.recalib_momentum)
    return out, None


def bn_backward(state, grad_out, cache):
    """Return (grad_input, grad_gamma, grad_beta) through the batch statistics."""
    if state.mode != BNMode.TRAIN:
        raise ModeError(f"bn_backward requires TRAIN mode, state is in {state.mode.value}")
    if cache is None:
        raise ModeError("bn_backward needs the cache of a TRAIN-mode forward call")
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {cache.x_hat.shape}")

    axes, x_hat, n = cache.axes, cache.x_hat, cache.population
    shape = (1, -1, 1, 1) if x_hat.ndim == 4 else (1, -1)

    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)

    d_xhat = grad_out * state.gamma.reshape(shape)
    sum_d = d_xhat.sum(axis=axes).reshape(shape)
    sum_dx = (d_xhat * x_hat).sum(axis=axes).reshape(shape)
    # unbiased variance: the x_hat term is scaled by 1/(n-1)
    grad_in = cache.inv_std.reshape(shape) * (d_xhat - sum_d / n - x_hat * sum_dx / (n - 1))
    return grad_in, grad_gamma, grad_beta


def reset_moving_stats(state):
    state.moving_mean[...] = 0
    state.moving_var[...] = 1
    state.recalib_steps = 0
