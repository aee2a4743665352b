"""Delta-rule linear-attention kernel.

The recurrent state S is a (d_v, d_k) fast-weight matrix per head. Each token
performs one step of in-context gradient descent on a squared prediction
error: the state first decays per key channel, then receives a rank-1
correction that moves its prediction S k toward the token value v at a
per-channel write rate,

    u_i = v_i - S_{i-1} k_i            (prediction error)
    S_i = S_{i-1} * diag(w_i) + outer(u_i, k_i * eta_i)
    y_i = S_i q_i                      (read after write)

With eta = 1, w = 1 and a unit key this overwrites whatever the state stored
under that key, which is what separates the delta rule from purely additive
linear attention.

Three routes compute the same function:
  * delta_sequence_naive: token-by-token fold, the readable reference
  * delta_sequence_chunked: intra-chunk matrix form with a unit
    lower-triangular solve, mathematically exact, much faster
  * delta_sequence_backward: exact gradients, either by differentiating the
    chunked graph or by reverse accumulation over the naive recurrence

The chunked route divides by cumulative decay products, so it watches the
accumulated log-decay per chunk and falls back to the naive fold whenever the
ratios could leave the floating range; results are checked finite either way.

Also here: the kernelized linear-attention baseline (feature map elu + 1,
normalizing denominator) and a brute-force causal softmax reference, kept as
independent comparison points for the delta kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .tensor_core import NonFiniteError, ShapeError, check_finite

# past this much accumulated |log decay| inside one chunk the decay-ratio
# trick risks overflow/underflow, so the chunk is folded naively instead
_LOG_GUARD = {np.dtype(np.float32): 60.0, np.dtype(np.float64): 300.0}

DENOM_FLOOR = 1e-8  # linear-attention denominator clamp


@dataclass
class ProjectionSet:
    """Per-token kernel inputs, each (T, d) or (T, heads, d).

    query/key share the key width, value may differ; decay and write_rate are
    per key channel. All five must agree on T and head layout.
    """

    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    decay: np.ndarray
    write_rate: np.ndarray

    def __post_init__(self) -> None:
        arrs = (self.query, self.key, self.value, self.decay, self.write_rate)
        names = ("query", "key", "value", "decay", "write_rate")
        nd = self.key.ndim
        if nd not in (2, 3):
            raise ShapeError(f"key must be (T, d) or (T, heads, d), got {self.key.shape}")
        for name, a in zip(names, arrs):
            if a.ndim != nd or a.shape[:-1] != self.key.shape[:-1]:
                raise ShapeError(
                    f"{name} shape {a.shape} does not match key shape {self.key.shape}"
                )
        for name, a in zip(("query", "decay", "write_rate"), (self.query, self.decay, self.write_rate)):
            if a.shape[-1] != self.key.shape[-1]:
                raise ShapeError(
                    f"{name} width {a.shape[-1]} != key width {self.key.shape[-1]}"
                )

    def __len__(self) -> int:
        return self.key.shape[0]


@dataclass
class WkvState:
    """Fast-weight state, (heads, d_v, d_k)."""

    s: np.ndarray

    def __post_init__(self) -> None:
        if self.s.ndim != 3:
            raise ShapeError(f"state must be (heads, d_v, d_k), got {self.s.shape}")

    @classmethod
    def zeros(cls, heads: int, d_v: int, d_k: int, dtype=np.float32) -> "WkvState":
        return cls(np.zeros((heads, d_v, d_k), dtype=dtype))

    def frobenius_norms(self) -> np.ndarray:
        """Per-head Frobenius norm of the state."""
        return np.sqrt((self.s * self.s).sum(axis=(1, 2)))


class DeltaGrads(NamedTuple):
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    decay: np.ndarray
    write_rate: np.ndarray
    state: np.ndarray


# ---------------------------------------------------------------------------
# single step

def delta_step(state, k, v, w, eta):
    """One delta-rule update. state (..., d_v, d_k); k/w/eta (..., d_k); v (..., d_v)."""
    pred = np.einsum("...vk,...k->...v", state, k)
    err = v - pred
    return state * w[..., None, :] + err[..., :, None] * (k * eta)[..., None, :]


def wkv_output(q, state):
    """Read the state with a query: y = S q, contracting the key axis."""
    return np.einsum("...vk,...k->...v", state, q)


# ---------------------------------------------------------------------------
# shape plumbing

def _as_heads(p: ProjectionSet):
    """Return (q, k, v, w, eta) as (T, H, d) views plus a had_heads flag."""
    if p.key.ndim == 3:
        return p.query, p.key, p.value, p.decay, p.write_rate, True
    return (
        p.query[:, None, :],
        p.key[:, None, :],
        p.value[:, None, :],
        p.decay[:, None, :],
        p.write_rate[:, None, :],
        False,
    )


def _state3(s0, heads, d_v, d_k, dtype):
    if s0 is None:
        return np.zeros((heads, d_v, d_k), dtype=dtype), False
    if isinstance(s0, WkvState):
        s0 = s0.s
    if s0.ndim == 2:
        return s0[None].astype(dtype, copy=True), False
    if s0.ndim == 3:
        return s0.astype(dtype, copy=True), True
    raise ShapeError(f"initial state shape {s0.shape}")


# ---------------------------------------------------------------------------
# naive route

def _naive_span(q, k, v, w, eta, s, y_out, base, check_every=1):
    """Fold tokens [0, L) of the given (L, H, d) views into state s, writing
    outputs into y_out; `base` offsets token indices in error messages."""
    for i in range(q.shape[0]):
        s = delta_step(s, k[i], v[i], w[i], eta[i])
        if check_every and i % check_every == 0 and not np.all(np.isfinite(s)):
            raise NonFiniteError(f"state diverged at token {base + i}")
        y_out[i] = wkv_output(q[i], s)
    return s


def delta_sequence_naive(p: ProjectionSet, s0=None, check_every: int = 1):
    """Reference rollout. Returns (y, final_state) shaped like the inputs."""
    q, k, v, w, eta, had_heads = _as_heads(p)
    t_len, heads, d_k = k.shape
    s, state_had_heads = _state3(s0, heads, v.shape[-1], d_k, k.dtype)
    y = np.empty((t_len, heads, v.shape[-1]), dtype=k.dtype)
    s = _naive_span(q, k, v, w, eta, s, y, 0, check_every)
    check_finite(s, "final state")
    if not had_heads:
        return y[:, 0, :], (s if state_had_heads else s[0])
    return y, s


# ---------------------------------------------------------------------------
# chunked route
#
# Inside a chunk starting from state S0, let cw_i be the running product of
# decays up to and including token i (cw_{-1} = 1). Substituting
# S_i = D_i * cw_i (columnwise) turns the decayed recurrence into a plain
# delta rule for D with rescaled keys, and collecting the rank-1 corrections
# gives, with
#     hat_k_i = k_i * cw_{i-1},   til_e_i = (k_i * eta_i) / cw_i,
#     til_q_i = q_i * cw_i,
# the strictly lower-triangular system
#     (I + strict_lower(hat_K til_E^T)) U = V - hat_K S0^T
# whose solution U stacks the per-token prediction errors u_i. Outputs and
# the end state are then chunk-level matmuls:
#     Y = til_Q S0^T + lower_incl(til_Q til_E^T) U
#     S_end = S0 * cw_last + U^T (til_E * cw_last)
#
# Chunk internals run head-major (H, L, d) so every contraction is a batched
# matmul; callers slice (T, H, d) arrays and transpose at the boundary.

_MASK_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _masks(l_len: int):
    if l_len not in _MASK_CACHE:
        incl = np.tril(np.ones((l_len, l_len), dtype=np.float64))
        _MASK_CACHE[l_len] = (np.tril(incl, -1), incl)
    return _MASK_CACHE[l_len]


def _inv_unit_lower(t: np.ndarray, assume_strict: bool = False) -> np.ndarray:
    """Invert batched unit lower-triangular matrices (..., L, L).

    Only the strictly lower part N is read; the diagonal is taken to be 1
    (assume_strict skips re-masking when the caller already zeroed the rest).
    Uses the Neumann-series doubling product
        (I + N)^-1 = (I - N)(I + N^2)(I + N^4)(I + N^8) ...
    (the partial sum of (-N)^j over j < 2k doubles to j < 4k when multiplied
    by I + N^2k), which is exact after ceil(log2 L) squarings because
    N^L = 0. Everything is a batched matmul, with none of the per-matrix
    overhead a batched LAPACK solve carries at these sizes.
    """
    l_len = t.shape[-1]
    n = t if assume_strict else np.tril(t, -1)
    inv = -n
    idx = np.arange(l_len)
    inv[..., idx, idx] += 1.0
    k = 1
    while 2 * k < l_len:  # powers < 2k are covered; stop once 2k >= L
        n = n @ n
        inv += inv @ n
        k *= 2
    return inv


def _chunk_fwd(s0, q, k, v, w, eta, keep: bool = False):
    """One chunk in matrix form. Token slices are (H, L, d); s0 (H, d_v, d_k).

    Returns (y, s_end, cache) with y (H, L, d_v); cache is None unless keep.
    A None y signals "use the naive path for this chunk". float32 chunks are
    computed in float64 and cast back: the decay-ratio rescalings amplify
    rounding, and the equivalence contract against the naive fold is tighter
    than plain float32 chunk math delivers.
    """
    out_dtype = k.dtype
    compute = np.float64 if out_dtype == np.float32 else out_dtype
    guard = _LOG_GUARD[np.dtype(compute)]
    s0, q, k, v, w, eta = (
        np.ascontiguousarray(a, dtype=compute) for a in (s0, q, k, v, w, eta)
    )
    l_len = k.shape[1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logw = np.log(w)
        lam = np.cumsum(logw, axis=1)
        lo, hi = lam.min(), lam.max()
        if not (lo >= -guard and hi <= guard):  # also catches NaN
            return None, None, None
        cw = np.exp(lam)
        cw_prev = cw / w  # exp(lam - logw), but one exp cheaper
        cw_inv = 1.0 / cw
        cw_last = cw[:, -1, :]  # (H, d_k)

        e = k * eta
        til_e = e * cw_inv
        hat_k = k * cw_prev
        til_q = q * cw
        til_e_t = til_e.transpose(0, 2, 1)
        s0_t = s0.transpose(0, 2, 1)  # (H, d_k, d_v)

        strict, incl = _masks(l_len)
        a_strict = hat_k @ til_e_t
        a_strict *= strict
        a_inv = _inv_unit_lower(a_strict, assume_strict=True)
        rhs = v - hat_k @ s0_t  # (H, L, d_v)
        u = a_inv @ rhs

        g = til_q @ til_e_t
        g *= incl
        y = til_q @ s0_t + g @ u
        s_end = s0 * cw_last[:, None, :] + u.transpose(0, 2, 1) @ (
            til_e * cw_last[:, None, :]
        )
    # sum trick: any nan/inf poisons the sum (inf + -inf is nan), one reduce
    # per array instead of full isfinite scans
    if not np.isfinite(y.sum() + s_end.sum()):
        return None, None, None
    cache = None
    if keep:
        cache = dict(
            s0=s0, q=q, k=k, w=w, eta=eta, e=e, cw=cw, cw_prev=cw_prev,
            cw_inv=cw_inv, cw_last=cw_last, til_e=til_e, hat_k=hat_k,
            til_q=til_q, a_inv=a_inv, g=g, u=u,
        )
    return y.astype(out_dtype, copy=False), s_end.astype(out_dtype, copy=False), cache


def _pack_chunks(arrs, chunk_len: int, compute):
    """Repack (T, H, d) arrays as contiguous (n_full, H, chunk_len, d) blocks.

    Only full chunks are packed; a shorter tail stays the caller's problem.
    """
    t_len, heads = arrs[0].shape[:2]
    n_full = t_len // chunk_len
    return tuple(
        np.ascontiguousarray(
            a[: n_full * chunk_len]
            .reshape(n_full, chunk_len, heads, a.shape[-1])
            .transpose(0, 2, 1, 3),
            dtype=compute,
        )
        for a in arrs
    )


def delta_sequence_chunked(p: ProjectionSet, s0=None, chunk_len: int = 32):
    """Chunk-parallel rollout, exactly equal to the naive fold (up to roundoff)."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    q, k, v, w, eta, had_heads = _as_heads(p)
    t_len, heads, d_k = k.shape
    out_dtype = k.dtype
    compute = np.float64 if out_dtype == np.float32 else out_dtype
    s, state_had_heads = _state3(s0, heads, v.shape[-1], d_k, out_dtype)
    y = np.empty((t_len, heads, v.shape[-1]), dtype=out_dtype)
    # Pack full chunks as (n, heads, L, d) in compute precision so the loop
    # hands _chunk_fwd contiguous blocks (per-chunk slices of a (heads, T, d)
    # layout would each copy). The state threads through in compute precision;
    # assignments into y downcast on the fly.
    q4, k4, v4, w4, e4 = _pack_chunks((q, k, v, w, eta), chunk_len, compute)
    s = s.astype(compute, copy=False)
    for c, a in enumerate(range(0, t_len, chunk_len)):
        b = min(a + chunk_len, t_len)
        sl = slice(a, b)
        if c < q4.shape[0]:
            args = (q4[c], k4[c], v4[c], w4[c], e4[c])
        else:  # tail shorter than chunk_len
            args = tuple(
                np.ascontiguousarray(x[sl].transpose(1, 0, 2), dtype=compute)
                for x in (q, k, v, w, eta)
            )
        yc, s_end, _ = _chunk_fwd(s, *args)
        if yc is None:
            s = _naive_span(q[sl], k[sl], v[sl], w[sl], eta[sl], s, y[sl], a)
        else:
            y[sl] = yc.transpose(1, 0, 2)
            s = s_end
    s = s.astype(out_dtype, copy=False)
    check_finite(y, "chunked outputs")
    check_finite(s, "final state")
    if not had_heads:
        return y[:, 0, :], (s if state_had_heads else s[0])
    return y, s


# ---------------------------------------------------------------------------
# backward

def _naive_span_bwd(s_start, q, k, v, w, eta, d_y, d_s):
    """Reverse accumulation over the plain recurrence for one span.

    Recomputes the L+1 states from s_start, then walks tokens backward.
    Returns per-token input grads and the gradient w.r.t. s_start.
    """
    l_len = q.shape[0]
    states = [s_start]
    for i in range(l_len):
        states.append(delta_step(states[-1], k[i], v[i], w[i], eta[i]))
    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    d_w = np.zeros_like(w)
    d_eta = np.zeros_like(eta)
    d_s = d_s.copy()
    for i in range(l_len - 1, -1, -1):
        s_prev, s_cur = states[i], states[i + 1]
        d_q[i] = np.einsum("hvk,hv->hk", s_cur, d_y[i])
        d_s += np.einsum("hv,hk->hvk", d_y[i], q[i])
        e = k[i] * eta[i]
        err = v[i] - np.einsum("hvk,hk->hv", s_prev, k[i])
        d_err = np.einsum("hvk,hk->hv", d_s, e)
        d_e = np.einsum("hvk,hv->hk", d_s, err)
        d_v[i] = d_err
        d_w[i] = np.einsum("hvk,hvk->hk", d_s, s_prev)
        d_k[i] = -np.einsum("hv,hvk->hk", d_err, s_prev) + d_e * eta[i]
        d_eta[i] = d_e * k[i]
        d_s = d_s * w[i][:, None, :] - np.einsum("hv,hk->hvk", d_err, k[i])
    return d_q, d_k, d_v, d_w, d_eta, d_s


def _chunk_bwd(cache, d_y, d_send):
    """Differentiate _chunk_fwd. d_y (H, L, d_v), d_send (H, d_v, d_k).

    Returns (H, L, d) per-token grads and d_s0.
    """
    s0, u, g, a_inv = cache["s0"], cache["u"], cache["g"], cache["a_inv"]
    til_q, til_e, hat_k = cache["til_q"], cache["til_e"], cache["hat_k"]
    cw, cw_prev, cw_inv, cw_last = (
        cache["cw"], cache["cw_prev"], cache["cw_inv"], cache["cw_last"],
    )
    k, eta, e, q, w = cache["k"], cache["eta"], cache["e"], cache["q"], cache["w"]
    l_len = k.shape[1]
    strict, incl = _masks(l_len)
    d_y = d_y.astype(k.dtype, copy=False)
    d_send = d_send.astype(k.dtype, copy=False)

    # s_end = s0 * cw_last + U^T (til_e * cw_last)
    d_s0 = d_send * cw_last[:, None, :]
    d_cwl = (d_send * s0).sum(axis=1)
    te_l = til_e * cw_last[:, None, :]
    d_u = te_l @ d_send.transpose(0, 2, 1)  # (H, L, d_v)
    d_te_l = u @ d_send  # (H, L, d_k)
    d_til_e = d_te_l * cw_last[:, None, :]
    d_cwl += (d_te_l * til_e).sum(axis=1)

    # y = til_q S0^T + G U
    d_til_q = d_y @ s0
    d_s0 += (til_q.transpose(0, 2, 1) @ d_y).transpose(0, 2, 1)
    d_g = d_y @ u.transpose(0, 2, 1)
    d_g *= incl
    d_u += g.transpose(0, 2, 1) @ d_y

    # G = lower_incl(til_q til_e^T)
    d_til_q += d_g @ til_e
    d_til_e += d_g.transpose(0, 2, 1) @ til_q

    # U = A^{-1} rhs with A = I + strict_lower(hat_k til_e^T): d_rhs solves
    # the transposed system and d_A = -d_rhs U^T lands on the strict triangle
    d_rhs = a_inv.transpose(0, 2, 1) @ d_u
    d_m = -(d_rhs @ u.transpose(0, 2, 1))
    d_m *= strict

    # rhs = v - hat_k S0^T
    d_v = d_rhs
    d_hat_k = -(d_rhs @ s0)
    d_s0 -= (hat_k.transpose(0, 2, 1) @ d_rhs).transpose(0, 2, 1)

    # M = strict_lower(hat_k til_e^T)
    d_hat_k += d_m @ til_e
    d_til_e += d_m.transpose(0, 2, 1) @ hat_k

    # unwind the decay rescalings
    d_q = d_til_q * cw
    d_cw = d_til_q * q
    d_k = d_hat_k * cw_prev
    d_cw_prev = d_hat_k * k
    d_e = d_til_e * cw_inv
    d_cw_inv = d_til_e * e
    d_k += d_e * eta
    d_eta = d_e * k

    # lam enters via cw = exp(lam), cw_inv = exp(-lam), cw_prev = exp(lam - logw),
    # cw_last = cw[:, -1]
    d_cw[:, -1, :] += d_cwl
    d_lam = d_cw * cw - d_cw_inv * cw_inv
    d_lam_prev = d_cw_prev * cw_prev
    # lam = cumsum(logw) along L; lam_prev = lam - logw
    rev = np.flip(np.cumsum(np.flip(d_lam + d_lam_prev, 1), axis=1), 1)
    d_logw = rev - d_lam_prev
    d_w = d_logw / w
    return d_q, d_k, d_v, d_w, d_eta, d_s0


def delta_sequence_backward(
    p: ProjectionSet,
    d_y: np.ndarray,
    s0=None,
    d_final_state=None,
    chunk_len: int = 32,
    via: str = "chunked",
) -> DeltaGrads:
    """Exact gradients of the sequence rollout.

    d_y matches the forward output shape; d_final_state (optional) is the
    upstream gradient on the final state. via="chunked" differentiates the
    chunk graph (fast); via="naive" is the per-token reference. Both use
    checkpointing: only chunk-boundary states are stored, the interior is
    recomputed chunk by chunk during the reverse sweep.
    """
    if via not in ("chunked", "naive"):
        raise ValueError(f"unknown backward route {via!r}")
    q, k, v, w, eta, had_heads = _as_heads(p)
    t_len, heads, d_k_width = k.shape
    if d_y.shape[0] != t_len:
        raise ShapeError(f"d_y length {d_y.shape[0]} != sequence length {t_len}")
    d_y3 = d_y if d_y.ndim == 3 else d_y[:, None, :]
    out_dtype = k.dtype
    compute = np.float64 if out_dtype == np.float32 else out_dtype
    s, state_had_heads = _state3(s0, heads, v.shape[-1], d_k_width, out_dtype)
    s = s.astype(compute, copy=False)
    step = chunk_len if via == "chunked" else max(t_len, 1)
    if via == "chunked":
        q4, k4, v4, w4, e4 = _pack_chunks((q, k, v, w, eta), step, compute)
    d_yh = np.ascontiguousarray(d_y3.transpose(1, 0, 2), dtype=compute)

    def chunk_args(c, sl):
        if via == "chunked" and c < q4.shape[0]:
            return (q4[c], k4[c], v4[c], w4[c], e4[c])
        return tuple(
            np.ascontiguousarray(x[sl].transpose(1, 0, 2), dtype=compute)
            for x in (q, k, v, w, eta)
        )

    # forward sweep: keep chunk-boundary states and which route each chunk took
    starts = list(range(0, t_len, step))
    bounds, routes = [], []
    y_scratch = np.empty((min(step, t_len), heads, v.shape[-1]), dtype=k.dtype)
    for c, a in enumerate(starts):
        b = min(a + step, t_len)
        sl = slice(a, b)
        bounds.append(s)
        s_end = None
        if via == "chunked":
            _, s_end, _ = _chunk_fwd(s, *chunk_args(c, sl))
        if s_end is None:
            s = _naive_span(q[sl], k[sl], v[sl], w[sl], eta[sl], s,
                            y_scratch[: b - a], a)
            routes.append("naive")
        else:
            s = s_end
            routes.append("chunked")

    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    d_w = np.zeros_like(w)
    d_eta = np.zeros_like(eta)
    d_s = (
        np.zeros_like(s)
        if d_final_state is None
        else _state3(d_final_state, heads, v.shape[-1], d_k_width, k.dtype)[0]
    )
    d_s = d_s.astype(compute, copy=False)

    for idx in range(len(starts) - 1, -1, -1):
        a = starts[idx]
        b = min(a + step, t_len)
        sl = slice(a, b)
        s_start = bounds[idx]
        if routes[idx] == "chunked":
            _, _, cache = _chunk_fwd(s_start, *chunk_args(idx, sl), keep=True)
            gq, gk, gv, gw, ge, d_s = _chunk_bwd(cache, d_yh[:, sl], d_s)
            d_q[sl] = gq.transpose(1, 0, 2)
            d_k[sl] = gk.transpose(1, 0, 2)
            d_v[sl] = gv.transpose(1, 0, 2)
            d_w[sl] = gw.transpose(1, 0, 2)
            d_eta[sl] = ge.transpose(1, 0, 2)
        else:
            out = _naive_span_bwd(
                s_start, q[sl], k[sl], v[sl], w[sl], eta[sl], d_y3[sl], d_s
            )
            d_q[sl], d_k[sl], d_v[sl], d_w[sl], d_eta[sl], d_s = out

    d_s = d_s.astype(out_dtype, copy=False)
    if not had_heads:
        return DeltaGrads(
            d_q[:, 0], d_k[:, 0], d_v[:, 0], d_w[:, 0], d_eta[:, 0],
            d_s if state_had_heads else d_s[0],
        )
    return DeltaGrads(d_q, d_k, d_v, d_w, d_eta, d_s)


# ---------------------------------------------------------------------------
# linear-attention and softmax baselines

def elu_plus_one(x: np.ndarray) -> np.ndarray:
    """The positive feature map psi(x) = elu(x) + 1."""
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def linear_attention_recurrent(q, k, v, floor: float = DENOM_FLOOR):
    """Additive fast-weight form: running sums of psi(k)^T v and psi(k).

    Arrays are (T, d). Returns (y, clamp_count) where clamp_count is how many
    tokens hit the denominator floor.
    """
    t_len, d_k = k.shape
    fast = np.zeros((v.shape[1], d_k), dtype=q.dtype)
    zeta = np.zeros(d_k, dtype=q.dtype)
    y = np.empty((t_len, v.shape[1]), dtype=q.dtype)
    clamps = 0
    for i in range(t_len):
        fk = elu_plus_one(k[i])
        fq = elu_plus_one(q[i])
        fast += np.outer(v[i], fk)
        zeta += fk
        den = zeta @ fq
        if den < floor:
            den = floor
            clamps += 1
        y[i] = (fast @ fq) / den
    return y, clamps


def linear_attention_direct(q, k, v, floor: float = DENOM_FLOOR):
    """Masked-matrix form of the same baseline, one pass of matmuls.

    Normalizes the score matrix before mixing values, so a single token's
    weight is exactly 1 and y_0 == v_0 bitwise.
    """
    fq = elu_plus_one(q)
    fk = elu_plus_one(k)
    scores = fq @ fk.T  # (T, T)
    t_len = q.shape[0]
    mask = np.tril(np.ones((t_len, t_len), dtype=bool))
    scores = scores * mask
    den = scores.sum(axis=1, keepdims=True)
    clamps = int((den < floor).sum())
    y = (scores / np.maximum(den, floor)) @ v
    return y, clamps


def softmax_attention(q, k, v, scale=None):
    """Brute-force causal softmax attention, the quadratic reference."""
    t_len, d_k = q.shape
    scale = 1.0 / np.sqrt(d_k) if scale is None else scale
    logits = (q @ k.T) * scale
    mask = np.tril(np.ones((t_len, t_len), dtype=bool))
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    wts = np.exp(logits)
    wts /= wts.sum(axis=1, keepdims=True)
    return wts @ v


# ---------------------------------------------------------------------------
# random inputs in the kernel's contract ranges (tests, bench, gradcheck)

def random_projections(
    rng: np.random.Generator,
    t_len: int,
    heads: int | None,
    d_k: int,
    d_v: int | None = None,
    dtype=np.float64,
    decay_range: tuple[float, float] = (0.05, 0.999),
    unit_keys: bool = True,
) -> ProjectionSet:
    """Draw a ProjectionSet in the kernel's operating ranges.

    Decay in (lo, hi), write rate in (0, 1), and unit-norm keys by default
    (raw gaussian keys let long random rollouts drift out of float range,
    which is exactly what the key normalization upstream prevents).
    """
    d_v = d_k if d_v is None else d_v
    shape = (t_len, d_k) if heads is None else (t_len, heads, d_k)
    vshape = (t_len, d_v) if heads is None else (t_len, heads, d_v)
    lo, hi = decay_range
    key = rng.standard_normal(shape)
    if unit_keys and t_len:
        key /= np.maximum(np.linalg.norm(key, axis=-1, keepdims=True), 1e-12)
    return ProjectionSet(
        query=rng.standard_normal(shape).astype(dtype),
        key=key.astype(dtype),
        value=rng.standard_normal(vshape).astype(dtype),
        decay=rng.uniform(lo, hi, shape).astype(dtype),
        write_rate=rng.uniform(0.0, 1.0, shape).astype(dtype),
    )
