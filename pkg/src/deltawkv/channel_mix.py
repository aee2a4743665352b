"""Channel mixing: the gated feed-forward that replaces a plain MLP.

Two branches over token-shifted input: a receptance gate r = sigmoid(. W_r)
and a key/value path h = squared_relu(. W_k) W_v with hidden width 2C. The
output is the elementwise product r * h, so the gate decides per channel how
much of the expanded features passes through. A standard two-layer MLP with
the same activation is kept alongside as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .spatial_mix import token_shift, token_shift_backward
from .tensor_core import GradPair, sigmoid, sigmoid_backward, squared_relu, squared_relu_backward


@dataclass
class ChannelMixParams:
    """Gated feed-forward tensors: hidden width is 2C by default."""

    mu_r: GradPair
    mu_k: GradPair
    w_r: GradPair
    w_k: GradPair
    w_v: GradPair

    @classmethod
    def init(cls, rng, channels: int, hidden: int | None = None, dtype=np.float64):
        c = channels
        h = 2 * c if hidden is None else hidden

        def dense(n_in, n_out):
            return GradPair((rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype))

        return cls(
            mu_r=GradPair(np.zeros(c, dtype=dtype)),
            mu_k=GradPair(np.zeros(c, dtype=dtype)),
            w_r=dense(c, c),
            w_k=dense(c, h),
            w_v=dense(h, c),
        )

    def pairs(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def channel_mix_forward(x, p: ChannelMixParams):
    """r * h over (T, C): gate times expanded-and-projected features.

    Returns (out, cache).
    """
    sr = token_shift(x, p.mu_r.value)
    sk = token_shift(x, p.mu_k.value)
    r = sigmoid(sr @ p.w_r.value)
    pre = sk @ p.w_k.value
    act = squared_relu(pre)
    h = act @ p.w_v.value
    out = r * h
    cache = dict(x=x, sr=sr, sk=sk, r=r, pre=pre, act=act, h=h)
    return out, cache


def channel_mix_backward(d_out, cache, p: ChannelMixParams):
    """Accumulates into p.*.grad; returns d_x."""
    r, h = cache["r"], cache["h"]
    d_r = d_out * h
    d_h = d_out * r
    d_act = d_h @ p.w_v.value.T
    p.w_v.grad += cache["act"].T @ d_h
    d_pre = squared_relu_backward(d_act, cache["pre"])
    d_sk = d_pre @ p.w_k.value.T
    p.w_k.grad += cache["sk"].T @ d_pre
    d_rpre = sigmoid_backward(d_r, r)
    d_sr = d_rpre @ p.w_r.value.T
    p.w_r.grad += cache["sr"].T @ d_rpre

    d_x1, d_mu_r = token_shift_backward(d_sr, cache["x"], p.mu_r.value)
    d_x2, d_mu_k = token_shift_backward(d_sk, cache["x"], p.mu_k.value)
    p.mu_r.grad += d_mu_r
    p.mu_k.grad += d_mu_k
    return d_x1 + d_x2


@dataclass
class MlpParams:
    """Plain two-layer feed-forward, the ablation stand-in for channel mixing."""

    w1: GradPair
    w2: GradPair

    @classmethod
    def init(cls, rng, channels: int, hidden: int | None = None, dtype=np.float64):
        c = channels
        h = 2 * c if hidden is None else hidden
        return cls(
            w1=GradPair((rng.standard_normal((c, h)) / np.sqrt(c)).astype(dtype)),
            w2=GradPair((rng.standard_normal((h, c)) / np.sqrt(h)).astype(dtype)),
        )

    def pairs(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def mlp_forward(x, p: MlpParams):
    """squared_relu(x W1) W2, same hidden width and activation as channel mix."""
    pre = x @ p.w1.value
    act = squared_relu(pre)
    out = act @ p.w2.value
    return out, dict(x=x, pre=pre, act=act)


def mlp_backward(d_out, cache, p: MlpParams):
    d_act = d_out @ p.w2.value.T
    p.w2.grad += cache["act"].T @ d_out
    d_pre = squared_relu_backward(d_act, cache["pre"])
    p.w1.grad += cache["x"].T @ d_pre
    return d_pre @ p.w1.value.T
