"""Spatial mixing: delta-rule attention over direction-ordered image tokens.

An image is flattened into a token sequence along one of four scan orders
(forward/backward raster, downward/upward column order). Each token builds
its kernel inputs from a learned blend of itself and its predecessor in scan
order (token shift), with the cheap per-channel signals (decay, write rate)
generated through low-rank tanh bottlenecks and squashed into (0, 1). Keys
are L2-normalized per head so the kernel's overwrite geometry is scale-free,
and the value stream carries a residual that lets later groups re-inject the
values seen by the previous group.

Everything here is a pure function over (T, C) arrays plus a parameter
bundle of GradPairs; backward passes accumulate into param.grad and return
input gradients.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from .tensor_core import GradPair, ShapeError, layer_norm, layer_norm_backward, sigmoid
from .wkv import ProjectionSet, delta_sequence_backward, delta_sequence_chunked

KEY_NORM_FLOOR = 1e-12  # per-head key norms below this are not rescaled


class ScanDirection(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    DOWNWARD = "downward"
    UPWARD = "upward"


# block at depth d inside a group scans along DIRECTION_CYCLE[d % 4]
DIRECTION_CYCLE = (
    ScanDirection.FORWARD,
    ScanDirection.BACKWARD,
    ScanDirection.DOWNWARD,
    ScanDirection.UPWARD,
)


def direction_for_depth(depth: int) -> ScanDirection:
    return DIRECTION_CYCLE[depth % 4]


def orient(img: np.ndarray, d: ScanDirection) -> np.ndarray:
    """Flatten (C, H, W) into a (T, C) token sequence along scan order d.

    Forward walks rows left-to-right, top-to-bottom; Backward is its exact
    reverse; Downward walks columns top-to-bottom, left-to-right; Upward
    reverses Downward.
    """
    c, h, w = img.shape
    if d in (ScanDirection.DOWNWARD, ScanDirection.UPWARD):
        seq = img.transpose(2, 1, 0).reshape(h * w, c)  # column-major walk
    else:
        seq = img.reshape(c, h * w).T
    if d in (ScanDirection.BACKWARD, ScanDirection.UPWARD):
        seq = seq[::-1]
    return np.ascontiguousarray(seq)


def deorient(seq: np.ndarray, d: ScanDirection, h: int, w: int) -> np.ndarray:
    """Exact inverse of orient: (T, C) back to (C, H, W)."""
    t_len, c = seq.shape
    if t_len != h * w:
        raise ShapeError(f"sequence length {t_len} != {h}*{w}")
    if d in (ScanDirection.BACKWARD, ScanDirection.UPWARD):
        seq = seq[::-1]
    if d in (ScanDirection.DOWNWARD, ScanDirection.UPWARD):
        return np.ascontiguousarray(seq.reshape(w, h, c).transpose(2, 1, 0))
    return np.ascontiguousarray(seq.T.reshape(c, h, w))


def lerp(a, b, mu):
    """a + (b - a) * mu, mu broadcast per channel."""
    return a + (b - a) * mu


def token_shift(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Blend each token with its predecessor: out_t = lerp(x_t, x_{t-1}, mu).

    The first token's predecessor is the zero vector.
    """
    prev = np.zeros_like(x)
    prev[1:] = x[:-1]
    return x + (prev - x) * mu


def token_shift_backward(d_out, x, mu):
    """Grads of token_shift w.r.t. x and mu."""
    prev = np.zeros_like(x)
    prev[1:] = x[:-1]
    d_mu = (d_out * (prev - x)).sum(axis=0)
    d_x = d_out * (1.0 - mu)
    d_x[:-1] += d_out[1:] * mu
    return d_x, d_mu


def lora(x, a, b):
    """Low-rank map A tanh(x B): b (C_in, rank), a (rank, C_out).

    Returns (out, hidden) with hidden = tanh(x @ b) kept for backward.
    """
    hidden = np.tanh(x @ b)
    return hidden @ a, hidden


def lora_backward(d_out, x, a, b, hidden):
    d_a = hidden.T @ d_out
    d_pre = (d_out @ a.T) * (1.0 - hidden * hidden)
    d_b = x.T @ d_pre
    d_x = d_pre @ b.T
    return d_x, d_a, d_b


def _heads(x: np.ndarray, head_size: int) -> np.ndarray:
    t_len, c = x.shape
    return x.reshape(t_len, c // head_size, head_size)


def normalize_keys(k: np.ndarray, head_size: int, floor: float = KEY_NORM_FLOOR):
    """Scale each per-head key vector to unit L2 norm.

    Norms at or below the floor are left unscaled-by-zero: the divisor is
    clamped, so near-zero keys stay near zero instead of blowing up.
    Returns (normalized (T, C), cache).
    """
    kh = _heads(k, head_size)
    raw = np.sqrt((kh * kh).sum(axis=-1, keepdims=True))
    div = np.maximum(raw, floor)
    kn = kh / div
    return kn.reshape(k.shape), (kh, kn, raw, div)


def normalize_keys_backward(d_kn, cache, head_size: int, floor: float = KEY_NORM_FLOOR):
    kh, kn, raw, div = cache
    d = _heads(d_kn, head_size)
    # d/dk (k / max(|k|, floor)): the norm only varies above the floor
    dot = (d * kn).sum(axis=-1, keepdims=True)
    d_kh = d / div - np.where(raw > floor, dot * kn / div, 0.0)
    return d_kh.reshape(d_kn.shape)


def value_residual(v_local, v_prev, mu, a, b):
    """Blend the local values with the previous group's stream.

    out = lora(lerp(v_local, v_prev, mu)) + layer_norm(v_local); out is both
    this block's kernel value input and the stream handed to the next group.
    A None v_prev (first group) blends v_local with itself.
    Returns (out, cache).
    """
    first = v_prev is None
    vp = v_local if first else v_prev
    mixed = v_local + (vp - v_local) * mu
    low, hidden = lora(mixed, a, b)
    normed, ln_cache = layer_norm(v_local)
    return low + normed, (v_local, vp, mixed, hidden, ln_cache, first)


def value_residual_backward(d_out, cache, mu, a, b):
    """Returns (d_v_local, d_v_prev, d_mu, d_a, d_b); d_v_prev is None when
    the forward pass defaulted v_prev to v_local."""
    v_local, vp, mixed, hidden, ln_cache, first = cache
    d_mixed, d_a, d_b = lora_backward(d_out, mixed, a, b, hidden)
    d_ln = layer_norm_backward(d_out, ln_cache)[0]
    d_mu = (d_mixed * (vp - v_local)).sum(axis=0)
    d_v_local = d_mixed * (1.0 - mu) + d_ln
    d_v_prev = d_mixed * mu
    if first:
        d_v_local += d_v_prev
        d_v_prev = None
    return d_v_local, d_v_prev, d_mu, d_a, d_b


@dataclass
class SpatialMixParams:
    """Learned tensors for one spatial mixing block (all GradPair).

    mu_*: token-shift blends per generated projection. w_q/w_k/w_v/w_out:
    dense projections. decay_a/decay_b and rate_a/rate_b: low-rank paths for
    the decay and write-rate signals (sigmoid applied downstream). vr_*: the
    value-residual blend and its low-rank map. head_gamma/head_beta: affine
    of the per-head output normalization.
    """

    mu_q: GradPair
    mu_k: GradPair
    mu_v: GradPair
    mu_w: GradPair
    mu_e: GradPair
    w_q: GradPair
    w_k: GradPair
    w_v: GradPair
    w_out: GradPair
    decay_a: GradPair
    decay_b: GradPair
    rate_a: GradPair
    rate_b: GradPair
    vr_mu: GradPair
    vr_a: GradPair
    vr_b: GradPair
    head_gamma: GradPair
    head_beta: GradPair

    @classmethod
    def init(cls, rng, channels: int, rank: int = 8, dtype=np.float64):
        """Fresh block parameters.

        Dense projections are 1/sqrt(fan_in) gaussian; every low-rank B
        (down-projection) starts at zero so the paths contribute nothing
        until trained; token-shift blends start at zero (no shift).
        """
        c = channels

        def dense(n_in, n_out):
            return GradPair((rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype))

        def zeros(*shape):
            return GradPair(np.zeros(shape, dtype=dtype))

        return cls(
            mu_q=zeros(c), mu_k=zeros(c), mu_v=zeros(c), mu_w=zeros(c), mu_e=zeros(c),
            w_q=dense(c, c), w_k=dense(c, c), w_v=dense(c, c), w_out=dense(c, c),
            decay_a=dense(rank, c), decay_b=zeros(c, rank),
            rate_a=dense(rank, c), rate_b=zeros(c, rank),
            vr_mu=zeros(c), vr_a=dense(rank, c), vr_b=zeros(c, rank),
            head_gamma=GradPair(np.ones(c, dtype=dtype)), head_beta=zeros(c),
        )

    def pairs(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def spatial_mix_forward(x, p: SpatialMixParams, head_size: int, v_prev=None,
                        chunk_len: int = 32):
    """One block of spatial attention over an oriented (T, C) sequence.

    x must already be in this block's scan order, and v_prev (if given) in
    the same order. Returns (y, v_out, cache): y is the mixed feature
    sequence, v_out the value stream for the next group.
    """
    t_len, c = x.shape
    if c % head_size:
        raise ShapeError(f"channels {c} not divisible by head_size {head_size}")

    shifted = {}
    for name, mu in (("q", p.mu_q), ("k", p.mu_k), ("v", p.mu_v),
                     ("w", p.mu_w), ("e", p.mu_e)):
        shifted[name] = token_shift(x, mu.value)

    q = shifted["q"] @ p.w_q.value
    k = shifted["k"] @ p.w_k.value
    v_local = shifted["v"] @ p.w_v.value
    decay_pre, decay_hidden = lora(shifted["w"], p.decay_a.value, p.decay_b.value)
    rate_pre, rate_hidden = lora(shifted["e"], p.rate_a.value, p.rate_b.value)
    decay = sigmoid(decay_pre)
    rate = sigmoid(rate_pre)

    k_n, key_cache = normalize_keys(k, head_size)
    v_used, vr_cache = value_residual(
        v_local, v_prev, p.vr_mu.value, p.vr_a.value, p.vr_b.value
    )

    proj = ProjectionSet(
        query=_heads(q, head_size),
        key=_heads(k_n, head_size),
        value=_heads(v_used, head_size),
        decay=_heads(decay, head_size),
        write_rate=_heads(rate, head_size),
    )
    y_att, _ = delta_sequence_chunked(proj, chunk_len=chunk_len)

    att = y_att.reshape(t_len, c)
    gamma_h = _heads(p.head_gamma.value[None, :], head_size)[0]
    beta_h = _heads(p.head_beta.value[None, :], head_size)[0]
    normed, ln_cache = layer_norm(_heads(att, head_size), gamma_h, beta_h)
    y = normed.reshape(t_len, c) @ p.w_out.value

    cache = dict(
        x=x, shifted=shifted, q=q, k=k, v_local=v_local,
        decay_pre=decay_pre, rate_pre=rate_pre,
        decay_hidden=decay_hidden, rate_hidden=rate_hidden,
        decay=decay, rate=rate, key_cache=key_cache, vr_cache=vr_cache,
        proj=proj, ln_cache=ln_cache, normed=normed,
        head_size=head_size, chunk_len=chunk_len,
    )
    return y, v_used, cache


def spatial_mix_backward(d_y, d_v_out, cache, p: SpatialMixParams):
    """Backward of spatial_mix_forward.

    d_v_out is the gradient flowing back along the value stream (zeros if
    the stream was unused downstream). Accumulates into p.*.grad and returns
    (d_x, d_v_prev); d_v_prev is None for a first-group block.
    """
    t_len, c = cache["x"].shape
    head_size = cache["head_size"]

    d_normed = (d_y @ p.w_out.value.T).reshape(t_len, -1)
    p.w_out.grad += cache["normed"].reshape(t_len, c).T @ d_y
    d_att_h, d_gamma_h, d_beta_h = layer_norm_backward(
        _heads(d_normed, head_size), cache["ln_cache"]
    )
    p.head_gamma.grad += d_gamma_h.reshape(-1)
    p.head_beta.grad += d_beta_h.reshape(-1)

    grads = delta_sequence_backward(
        cache["proj"], d_att_h, chunk_len=cache["chunk_len"], via="chunked"
    )
    d_q = grads.query.reshape(t_len, c)
    d_kn = grads.key.reshape(t_len, c)
    d_v_used = grads.value.reshape(t_len, c) + d_v_out
    d_decay = grads.decay.reshape(t_len, c)
    d_rate = grads.write_rate.reshape(t_len, c)

    d_k = normalize_keys_backward(d_kn, cache["key_cache"], head_size)
    d_v_local, d_v_prev, d_vr_mu, d_vr_a, d_vr_b = value_residual_backward(
        d_v_used, cache["vr_cache"], p.vr_mu.value, p.vr_a.value, p.vr_b.value
    )
    p.vr_mu.grad += d_vr_mu
    p.vr_a.grad += d_vr_a
    p.vr_b.grad += d_vr_b

    decay = cache["decay"]
    rate = cache["rate"]
    d_decay_pre = d_decay * decay * (1.0 - decay)
    d_rate_pre = d_rate * rate * (1.0 - rate)
    d_sw, d_da, d_db = lora_backward(
        d_decay_pre, cache["shifted"]["w"], p.decay_a.value, p.decay_b.value,
        cache["decay_hidden"],
    )
    p.decay_a.grad += d_da
    p.decay_b.grad += d_db
    d_se, d_ra, d_rb = lora_backward(
        d_rate_pre, cache["shifted"]["e"], p.rate_a.value, p.rate_b.value,
        cache["rate_hidden"],
    )
    p.rate_a.grad += d_ra
    p.rate_b.grad += d_rb

    d_sq = d_q @ p.w_q.value.T
    p.w_q.grad += cache["shifted"]["q"].T @ d_q
    d_sk = d_k @ p.w_k.value.T
    p.w_k.grad += cache["shifted"]["k"].T @ d_k
    d_sv = d_v_local @ p.w_v.value.T
    p.w_v.grad += cache["shifted"]["v"].T @ d_v_local

    d_x = np.zeros_like(cache["x"])
    for name, d_s, mu in (("q", d_sq, p.mu_q), ("k", d_sk, p.mu_k),
                          ("v", d_sv, p.mu_v), ("w", d_sw, p.mu_w),
                          ("e", d_se, p.mu_e)):
        d_xi, d_mu = token_shift_backward(d_s, cache["x"], mu.value)
        d_x += d_xi
        mu.grad += d_mu
    return d_x, d_v_prev
