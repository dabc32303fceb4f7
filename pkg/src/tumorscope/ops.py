"""Dense-tensor layer operations with exact analytic gradients.

Tensors are plain numpy arrays: C-contiguous (row-major), float32 for
training and inference, float64 when a caller needs extra precision (the
gradient-check tests run every op in 64-bit). Every public operation
validates shapes, is pure (same inputs, bitwise-same outputs), and raises
``ValueError`` if a non-finite value would escape.

Convolutions are "valid" (no padding, stride 1) and pooling is 2x2 with
stride 2 and floor truncation; together these are the only scheme that
reproduces the architecture's published layer shapes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "GradPair",
    "conv2d",
    "conv2d_backward",
    "maxpool2d",
    "maxpool2d_backward",
    "dense",
    "dense_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "dropout",
    "dropout_mask",
    "bce_loss",
    "require_finite",
]


class GradPair(tuple):
    """(value, grad) pair; grad has the shape of the differentiated input."""

    __slots__ = ()

    def __new__(cls, value, grad):
        return tuple.__new__(cls, (value, grad))

    @property
    def value(self):
        return self[0]

    @property
    def grad(self):
        return self[1]


def require_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Reject NaN/Inf; returns the array unchanged so calls can be chained."""
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in {what}")
    return arr


def _im2col(x: np.ndarray, k: int) -> tuple[np.ndarray, int, int]:
    """Unfold (C,H,W) into a (C*k*k, Ho*Wo) column matrix for a k x k kernel."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (C, Ho, Wo, k, k)
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, stride 1.

    x: (C_in, H, W); weights: (C_out, C_in, K, K); bias: (C_out,).
    Returns (C_out, H-K+1, W-K+1).
    """
    if x.ndim != 3 or weights.ndim != 4 or bias.ndim != 1:
        raise ValueError("conv2d: expected input (C,H,W), weights (O,C,K,K), bias (O,)")
    c_out, c_in, k, k2 = weights.shape
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, weights expect {c_in}")
    if bias.shape[0] != c_out:
        raise ValueError(f"conv2d: bias length {bias.shape[0]} != {c_out} filters")
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError(
            f"conv2d: kernel {k}x{k} larger than input {x.shape[1]}x{x.shape[2]}"
        )
    cols, ho, wo = _im2col(x, k)
    out = weights.reshape(c_out, -1) @ cols
    out += bias[:, None]
    return require_finite(out.reshape(c_out, ho, wo), "conv2d output")


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, weights, bias) for a given upstream."""
    c_out, c_in, k, _ = weights.shape
    ho, wo = x.shape[1] - k + 1, x.shape[2] - k + 1
    if upstream.shape != (c_out, ho, wo):
        raise ValueError(
            f"conv2d_backward: upstream shape {upstream.shape} != {(c_out, ho, wo)}"
        )
    up = upstream.reshape(c_out, -1)
    cols, _, _ = _im2col(x, k)
    grad_w = (up @ cols.T).reshape(weights.shape)
    grad_b = up.sum(axis=1)
    # grad wrt input: full correlation of upstream with the 180-degree-rotated
    # kernels, i.e. pad upstream by k-1 and convolve with transposed weights.
    padded = np.pad(upstream, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    w_flip = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gcols, hi, wi = _im2col(padded, k)
    grad_x = (w_flip.reshape(c_in, -1) @ gcols).reshape(c_in, hi, wi)
    require_finite(grad_x, "conv2d grad_input")
    require_finite(grad_w, "conv2d grad_weights")
    require_finite(grad_b, "conv2d grad_bias")
    return grad_x, grad_w, grad_b


def maxpool2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling, stride 2, floor truncation of odd trailing rows/cols.

    Returns (pooled, argmax) where argmax holds, per window, the flat
    row-major in-window index (0..3) of the winning cell; ties go to the
    first occurrence so gradients are deterministic.
    """
    if x.ndim != 3:
        raise ValueError("maxpool2d: expected input (C,H,W)")
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2d: input {h}x{w} smaller than 2x2 window")
    ho, wo = h // 2, w // 2
    win = x[:, : ho * 2, : wo * 2].reshape(c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(
    idx: np.ndarray, input_shape: tuple[int, int, int], upstream: np.ndarray
) -> np.ndarray:
    """Route upstream gradient entirely to each window's argmax cell."""
    c, h, w = input_shape
    ho, wo = h // 2, w // 2
    if upstream.shape != (c, ho, wo):
        raise ValueError(
            f"maxpool2d_backward: upstream shape {upstream.shape} != {(c, ho, wo)}"
        )
    scatter = np.zeros((c, ho, wo, 4), dtype=upstream.dtype)
    np.put_along_axis(scatter, idx[..., None], upstream[..., None], axis=3)
    grad = np.zeros(input_shape, dtype=upstream.dtype)
    grad[:, : ho * 2, : wo * 2] = (
        scatter.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho * 2, wo * 2)
    )
    return grad


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map: weights (N_out, N_in) @ x (N_in,) + bias (N_out,)."""
    if x.ndim != 1 or weights.ndim != 2 or bias.ndim != 1:
        raise ValueError("dense: expected input (N_in,), weights (N_out,N_in), bias (N_out,)")
    if weights.shape[1] != x.shape[0] or weights.shape[0] != bias.shape[0]:
        raise ValueError(
            f"dense: weights {weights.shape} incompatible with input {x.shape} / bias {bias.shape}"
        )
    return require_finite(weights @ x + bias, "dense output")


def dense_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of dense w.r.t. (input, weights, bias)."""
    if upstream.shape != (weights.shape[0],):
        raise ValueError(f"dense_backward: upstream shape {upstream.shape} != ({weights.shape[0]},)")
    grad_x = weights.T @ upstream
    grad_w = np.outer(upstream, x)
    grad_b = upstream.copy()
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Subgradient: passes upstream where x > 0, zero elsewhere (incl. x == 0)."""
    if upstream.shape != x.shape:
        raise ValueError("relu_backward: shape mismatch")
    return upstream * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic: never evaluates exp on a positive argument."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != np.shape(x):
        raise ValueError("sigmoid_backward: shape mismatch")
    s = sigmoid(x)
    return upstream * s * (1.0 - s)


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask with survivor scaling baked in: 1/(1-p) where kept, 0 where dropped."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must be in [0,1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=np.float32)
    keep = rng.random(shape) >= p
    return keep.astype(np.float32) / np.float32(1.0 - p)


def dropout(
    x: np.ndarray, p: float, rng: np.random.Generator, training: bool
) -> np.ndarray:
    """Inverted dropout: zero with probability p and rescale survivors by 1/(1-p).

    Inference mode is the identity and consumes no randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must be in [0,1), got {p}")
    if not training:
        return x
    return x * dropout_mask(x.shape, p, rng).astype(x.dtype)


def bce_loss(logit: float, target: int) -> GradPair:
    """Binary cross-entropy evaluated in the logit domain.

    loss = max(z,0) - z*t + log(1 + exp(-|z|)) equals
    -[t*log(sigmoid(z)) + (1-t)*log(1-sigmoid(z))] without ever forming a
    probability near 0 or 1. Gradient w.r.t. the logit is sigmoid(z) - t.
    """
    if target not in (0, 1):
        raise ValueError(f"bce_loss: target must be 0 or 1, got {target!r}")
    z = float(logit)
    if not np.isfinite(z):
        raise ValueError("bce_loss: non-finite logit")
    loss = max(z, 0.0) - z * target + np.log1p(np.exp(-abs(z)))
    grad = float(sigmoid(np.float64(z))) - target
    return GradPair(float(loss), float(grad))
