"""Dense-tensor primitives with explicit backward functions.

Everything runs on plain numpy arrays (float32 for training, float64 for
verification). There is no autodiff tape: each differentiable op here has a
matching ``*_backward`` that maps the upstream gradient to input and parameter
gradients, and callers compose those by hand in reverse order.

Conventions
  * feature maps are channel-first ``(C, H, W)``
  * token sequences are ``(T, C)``
  * backward functions return gradients in the same order as the forward
    inputs they correspond to
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced or received NaN/Inf."""


def check_finite(x: np.ndarray, what: str) -> None:
    """Raise NonFiniteError naming `what` if x contains NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class GradPair:
    """A value tensor paired with a gradient buffer of identical shape.

    The gradient starts at zero and is accumulated into; shape and dtype are
    locked to the value at construction.
    """

    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with a finiteness check on the result."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    out = a @ b
    check_finite(out, "matmul output")
    return out


def matmul_backward(
    d_out: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of matmul: (d_a, d_b) = (d_out @ b.T, a.T @ d_out)."""
    return d_out @ b.T, a.T @ d_out


# ---------------------------------------------------------------------------
# activations

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])  # stable for large negative x
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(d_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return d_out * out * (1.0 - out)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(d_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return d_out * (1.0 - out * out)


def squared_relu(x: np.ndarray) -> np.ndarray:
    """relu(x)**2, the feed-forward activation."""
    r = np.maximum(x, 0.0)
    return r * r


def squared_relu_backward(d_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return d_out * 2.0 * np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# layer norm

def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
    eps: float = 1e-5,
):
    """Normalize over the last axis, then optionally apply an affine.

    x: (..., C) with C >= 1. gamma/beta, if given, broadcast against the last
    axis. Returns (out, cache) where cache feeds layer_norm_backward.
    Pass gamma=None, beta=None for the pre-affine normalized output.
    """
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over empty last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma
    if beta is not None:
        out = out + beta
    check_finite(out, "layer_norm output")
    cache = (xhat, inv, gamma)
    return out, cache


def layer_norm_backward(d_out: np.ndarray, cache) -> tuple[np.ndarray, ...]:
    """Returns (d_x, d_gamma, d_beta); the affine grads are None when the
    forward ran without an affine."""
    xhat, inv, gamma = cache
    if gamma is None:
        d_gamma = d_beta = None
        d_xhat = d_out
    else:
        reduce_axes = tuple(range(d_out.ndim - gamma.ndim))
        d_gamma = (d_out * xhat).sum(axis=reduce_axes)
        d_beta = d_out.sum(axis=reduce_axes)
        d_xhat = d_out * gamma
    m1 = d_xhat.mean(axis=-1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = (d_xhat - m1 - xhat * m2) * inv
    return d_x, d_gamma, d_beta


# ---------------------------------------------------------------------------
# 3x3 same-padding convolution (cross-correlation, like every DL framework)

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """3x3 convolution with same padding.

    x: (C_in, H, W), w: (C_out, C_in, 3, 3), b: (C_out,) or None.
    Returns (C_out, H, W). Implemented as nine shifted einsums; the padded
    border contributes zeros.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d shapes x={x.shape} w={w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d channels: x has {x.shape[0]}, w expects {w.shape[1]}")
    c_in, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            out += np.einsum(
                "oc,chw->ohw", w[:, :, di, dj], xp[:, di : di + h, dj : dj + wd]
            )
    if b is not None:
        out += b[:, None, None]
    check_finite(out, "conv2d output")
    return out


def conv2d_backward(
    d_out: np.ndarray, x: np.ndarray, w: np.ndarray, with_bias: bool = True
):
    """Gradients of conv2d: returns (d_x, d_w, d_b)."""
    c_in, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    d_xp = np.zeros_like(xp)
    d_w = np.zeros_like(w)
    for di in range(3):
        for dj in range(3):
            d_w[:, :, di, dj] = np.einsum(
                "ohw,chw->oc", d_out, xp[:, di : di + h, dj : dj + wd]
            )
            d_xp[:, di : di + h, dj : dj + wd] += np.einsum(
                "oc,ohw->chw", w[:, :, di, dj], d_out
            )
    d_x = d_xp[:, 1 : h + 1, 1 : wd + 1]
    d_b = d_out.sum(axis=(1, 2)) if with_bias else None
    return d_x, d_w, d_b


# ---------------------------------------------------------------------------
# pixel shuffle (depth to space) and its inverse

def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(C*r*r, H, W) -> (C, H*r, W*r), out[c, r*i+a, r*j+b] = x[c*r*r + a*r + b, i, j]."""
    cr2, h, w = x.shape
    if r < 1 or cr2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {cr2} channels not divisible by r*r={r * r}")
    c = cr2 // (r * r)
    return (
        x.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)
    )


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of pixel_shuffle."""
    c, hr, wr = x.shape
    if r < 1 or hr % r != 0 or wr % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    return (
        x.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)
    )


def pixel_shuffle_backward(d_out: np.ndarray, r: int) -> np.ndarray:
    """pixel_shuffle is a permutation, so the gradient is the inverse shuffle."""
    return pixel_unshuffle(d_out, r)
