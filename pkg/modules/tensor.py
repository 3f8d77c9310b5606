"""
Dense numeric kernels on numpy arrays.

Activations are N,C,H,W; conv weights are C_out,C_in,K,K. Convolution is
cross-correlation (no kernel flip) and bias-free. Every kernel keeps the dtype
of its inputs, so float64 inputs give float64 gradients for gradient checks.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from modules.config import check_finite_enabled
from modules.errors import NumericError, ShapeError


def check_finite(array, where):
    """Raise NumericError if checking is on and the array holds NaN/Inf."""
    if check_finite_enabled() and not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values produced by {where}")
    return array


def _require_ndim(x, ndim, name):
    if x.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {x.shape}")


def output_size(size, kernel, stride, padding):
    """Spatial output extent; the division must be exact."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x, kernel, stride, padding):
    """View of shape N,C,H',W',K,K over the padded input."""
    xp = _pad(x, padding)
    view = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _check_conv(x, w, stride, padding, depthwise=False):
    _require_ndim(x, 4, "input")
    _require_ndim(w, 4, "weight")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"square kernels only, got {w.shape[2]}x{w.shape[3]}")
    if depthwise:
        if w.shape[1] != 1 or w.shape[0] != x.shape[1]:
            raise ShapeError(
                f"depthwise weight {w.shape} does not match input channels {x.shape[1]}"
            )
    elif w.shape[1] != x.shape[1]:
        raise ShapeError(f"weight expects C_in={w.shape[1]}, input has C={x.shape[1]}")
    k = w.shape[2]
    return output_size(x.shape[2], k, stride, padding), output_size(x.shape[3], k, stride, padding)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------
def conv2d_forward(x, w, stride=1, padding=0):
    _check_conv(x, w, stride, padding)
    cols = _windows(x, w.shape[2], stride, padding)
    # N,H',W',C_out -> N,C_out,H',W'
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return check_finite(out, "conv2d_forward")


def conv2d_backward(grad_out, x, w, stride=1, padding=0):
    """Return (grad_input, grad_weight) for conv2d_forward."""
    h_out, w_out = _check_conv(x, w, stride, padding)
    n, c_out = x.shape[0], w.shape[0]
    if grad_out.shape != (n, c_out, h_out, w_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c_out, h_out, w_out)}")
    k = w.shape[2]

    cols = _windows(x, k, stride, padding)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))

    xp_shape = (n, x.shape[1], x.shape[2] + 2 * padding, x.shape[3] + 2 * padding)
    grad_xp = np.zeros(xp_shape, dtype=np.result_type(grad_out, w))
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(grad_out, w[:, :, i, j], axes=([1], [0]))
            grad_xp[:, :, i:i + h_span:stride, j:j + w_span:stride] += contrib.transpose(0, 3, 1, 2)

    grad_x = grad_xp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
    grad_x = np.ascontiguousarray(grad_x)
    return check_finite(grad_x, "conv2d_backward"), check_finite(grad_w, "conv2d_backward")


def depthwise_conv2d_forward(x, w, stride=1, padding=0):
    _check_conv(x, w, stride, padding, depthwise=True)
    cols = _windows(x, w.shape[2], stride, padding)
    out = np.einsum("nchwij,cij->nchw", cols, w[:, 0])
    return check_finite(np.ascontiguousarray(out), "depthwise_conv2d_forward")


def depthwise_conv2d_backward(grad_out, x, w, stride=1, padding=0):
    h_out, w_out = _check_conv(x, w, stride, padding, depthwise=True)
    if grad_out.shape != (x.shape[0], x.shape[1], h_out, w_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    k = w.shape[2]

    cols = _windows(x, k, stride, padding)
    grad_w = np.einsum("nchw,nchwij->cij", grad_out, cols)[:, None]

    xp_shape = (x.shape[0], x.shape[1], x.shape[2] + 2 * padding, x.shape[3] + 2 * padding)
    grad_xp = np.zeros(xp_shape, dtype=np.result_type(grad_out, w))
    h_span = stride * (h_out - 1) + 1
    w_span = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i:i + h_span:stride, j:j + w_span:stride] += (
                grad_out * w[None, :, 0, i, j, None, None]
            )

    grad_x = np.ascontiguousarray(
        grad_xp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
    )
    return check_finite(grad_x, "depthwise_conv2d_backward"), check_finite(grad_w, "depthwise_conv2d_backward")


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------
def fc_forward(x, w, b=None):
    """x is N,F (or N,C,H,W, flattened in C,H,W order); w is F_out,F_in."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"fc expects {w.shape[1]} input features, got {flat.shape[1]}")
    out = flat @ w.T
    if b is not None:
        out = out + b
    return check_finite(out, "fc_forward")


def fc_backward(grad_out, x, w, has_bias=False):
    """Return (grad_input shaped like x, grad_weight, grad_bias or None)."""
    flat = x.reshape(x.shape[0], -1)
    if grad_out.shape != (flat.shape[0], w.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(flat.shape[0], w.shape[0])}")
    grad_x = (grad_out @ w).reshape(x.shape)
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Activations and pooling
# ---------------------------------------------------------------------------
def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def _pool_windows(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2x2 needs extents >= 2, got {h}x{w}")
    cropped = x[:, :, :2 * h2, :2 * w2]
    # N,C,H/2,W/2,4
    return cropped.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)


def maxpool2x2_forward(x):
    """2x2 / stride 2 max pool; odd trailing rows/columns are dropped."""
    _require_ndim(x, 4, "input")
    return np.ascontiguousarray(_pool_windows(x).max(axis=-1))


def maxpool2x2_backward(grad_out, x):
    _require_ndim(x, 4, "input")
    windows = _pool_windows(x)
    n, c, h2, w2, _ = windows.shape
    if grad_out.shape != (n, c, h2, w2):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c, h2, w2)}")
    # first maximal element of each window takes the gradient
    mask = np.zeros_like(windows, dtype=grad_out.dtype)
    np.put_along_axis(mask, windows.argmax(axis=-1)[..., None], 1, axis=-1)
    routed = mask * grad_out[..., None]
    routed = routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    grad_x = np.zeros(x.shape, dtype=grad_out.dtype)
    grad_x[:, :, :2 * h2, :2 * w2] = routed
    return grad_x


def global_avgpool_forward(x):
    _require_ndim(x, 4, "input")
    return x.mean(axis=(2, 3))


def global_avgpool_backward(grad_out, x):
    _require_ndim(x, 4, "input")
    n, c, h, w = x.shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c)}")
    grad = np.broadcast_to(grad_out[:, :, None, None] / (h * w), x.shape)
    return np.array(grad, dtype=grad_out.dtype)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------
def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    _require_ndim(logits, 2, "logits")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"label index out of range for {classes} classes")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()

    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return float(loss), check_finite(grad, "softmax_cross_entropy")
