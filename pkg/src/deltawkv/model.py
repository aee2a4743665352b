"""Model assembly: normalize, shallow convs, residual groups of scan blocks,
reconstruction, pixel-shuffle upsampling, denormalize.

The single-channel input is normalized with dataset statistics, lifted to C
feature channels by two 3x3 convs, then run through residual groups. Each
group stacks blocks that flatten the feature map along a scan direction
(cycling forward/backward/downward/upward), apply pre-norm spatial mixing and
channel mixing with residual adds, and fold the map back; a 3x3 conv plus a
group-level residual closes the group. A value stream produced by each
group's last block feeds the value-residual path of every block in the next
group. Reconstruction adds the deep features back onto the shallow ones
(global residual), and sub-pixel convolution upsamples by 2x per stage. The
final projection starts at zero, so a fresh model outputs the denormalized
zero baseline. Checkpoints serialize config plus all tensors to a flat,
sorted, f32 little-endian format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .channel_mix import (
    ChannelMixParams, MlpParams, channel_mix_backward, channel_mix_forward,
    mlp_backward, mlp_forward,
)
from .spatial_mix import (
    DIRECTION_CYCLE, ScanDirection, SpatialMixParams, deorient, orient,
    spatial_mix_backward, spatial_mix_forward,
)
from .tensor_core import (
    GradPair, ShapeError, check_finite, conv2d, conv2d_backward, layer_norm,
    layer_norm_backward, pixel_shuffle, pixel_shuffle_backward,
)


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


FFN_KINDS = ("channel_mix", "mlp")
SCAN_KINDS = ("quad", "forward_only")


@dataclass
class ModelConfig:
    channels: int = 96
    residual_groups: int = 4
    blocks_per_group: int = 4
    head_size: int = 16
    scale: int = 2
    lora_rank: int = 8
    ffn: str = "channel_mix"
    scan: str = "quad"

    def __post_init__(self):
        if min(self.channels, self.residual_groups, self.blocks_per_group,
               self.head_size, self.lora_rank) < 1:
            raise ConfigError("all size fields must be positive")
        if self.channels % self.head_size:
            raise ConfigError(
                f"channels {self.channels} not divisible by head_size {self.head_size}"
            )
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.ffn not in FFN_KINDS:
            raise ConfigError(f"ffn must be one of {FFN_KINDS}, got {self.ffn!r}")
        if self.scan not in SCAN_KINDS:
            raise ConfigError(f"scan must be one of {SCAN_KINDS}, got {self.scan!r}")
        if self.scan == "quad" and self.blocks_per_group % 4:
            raise ConfigError("blocks_per_group must be a multiple of 4 for quad scan")

    def to_lines(self) -> str:
        items = sorted(vars(self).items())
        return "".join(f"{k}={v}\n" for k, v in items)

    @classmethod
    def from_lines(cls, text: str) -> "ModelConfig":
        ints = {"channels", "residual_groups", "blocks_per_group", "head_size",
                "scale", "lora_rank"}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line {line!r}")
            k, _, v = line.partition("=")
            if k not in vars(cls()):
                raise ConfigError(f"unknown config key {k!r}")
            kwargs[k] = int(v) if k in ints else v
        return cls(**kwargs)

    def directions(self):
        """Scan direction for each block depth within a group."""
        if self.scan == "forward_only":
            return tuple(ScanDirection.FORWARD for _ in range(self.blocks_per_group))
        return tuple(DIRECTION_CYCLE[d % 4] for d in range(self.blocks_per_group))


@dataclass
class NormStats:
    """Dataset intensity statistics used by normalize/denormalize."""

    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.mean) or not np.isfinite(self.std):
            raise ConfigError("norm stats must be finite")
        if self.std < 1e-6:
            raise ConfigError(f"std must be >= 1e-6, got {self.std}")

    @classmethod
    def from_images(cls, images) -> "NormStats":
        flat = np.concatenate([np.asarray(im, dtype=np.float64).ravel() for im in images])
        return cls(float(flat.mean()), max(float(flat.std()), 1e-6))


def normalize(img: np.ndarray, stats: NormStats) -> np.ndarray:
    return (img - stats.mean) / stats.std


def denormalize(img: np.ndarray, stats: NormStats) -> np.ndarray:
    return img * stats.std + stats.mean


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ConvPair:
    w: GradPair
    b: GradPair

    def pairs(self):
        return {"w": self.w, "b": self.b}


@dataclass
class BlockParams:
    ln1_gamma: GradPair
    ln1_beta: GradPair
    ln2_gamma: GradPair
    ln2_beta: GradPair
    att: SpatialMixParams
    ffn: ChannelMixParams | MlpParams

    def pairs(self):
        out = {
            "ln1.gamma": self.ln1_gamma, "ln1.beta": self.ln1_beta,
            "ln2.gamma": self.ln2_gamma, "ln2.beta": self.ln2_beta,
        }
        for k, gp in self.att.pairs().items():
            out[f"att.{k}"] = gp
        for k, gp in self.ffn.pairs().items():
            out[f"ffn.{k}"] = gp
        return out


@dataclass
class GroupParams:
    blocks: list
    conv: ConvPair

    def pairs(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for k, gp in blk.pairs().items():
                out[f"blocks.{i}.{k}"] = gp
        out["conv.w"] = self.conv.w
        out["conv.b"] = self.conv.b
        return out


@dataclass
class ModelParams:
    conv1: ConvPair
    conv2: ConvPair
    groups: list
    recon: ConvPair
    ups: list
    head: ConvPair
    stats: NormStats = field(default_factory=NormStats)

    def pairs(self) -> dict:
        """Flat name -> GradPair map of every trainable tensor."""
        out = {}
        for name, cp in (("conv1", self.conv1), ("conv2", self.conv2),
                         ("recon", self.recon), ("head", self.head)):
            for k, gp in cp.pairs().items():
                out[f"{name}.{k}"] = gp
        for g, grp in enumerate(self.groups):
            for k, gp in grp.pairs().items():
                out[f"groups.{g}.{k}"] = gp
        for i, cp in enumerate(self.ups):
            for k, gp in cp.pairs().items():
                out[f"up.{i}.{k}"] = gp
        return out

    def param_count(self) -> int:
        """Trainable scalars (norm stats excluded)."""
        return sum(gp.value.size for gp in self.pairs().values())

    def zero_grad(self):
        for gp in self.pairs().values():
            gp.grad[:] = 0.0


def _conv_init(rng, c_in, c_out, dtype, zero=False):
    if zero:
        w = np.zeros((c_out, c_in, 3, 3), dtype=dtype)
    else:
        w = (rng.standard_normal((c_out, c_in, 3, 3)) / np.sqrt(c_in * 9.0)).astype(dtype)
    return ConvPair(GradPair(w), GradPair(np.zeros(c_out, dtype=dtype)))


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic fresh parameters.

    Dense maps are 1/sqrt(fan_in) gaussian; low-rank down-projections and the
    final head start at zero, so a new model is the identity-plus-nothing
    baseline and the low-rank paths switch on only through training.
    """
    rng = np.random.default_rng(seed)
    c = config.channels

    def ln_pair():
        return (GradPair(np.ones(c, dtype=dtype)), GradPair(np.zeros(c, dtype=dtype)))

    groups = []
    for _ in range(config.residual_groups):
        blocks = []
        for _ in range(config.blocks_per_group):
            g1, b1 = ln_pair()
            g2, b2 = ln_pair()
            att = SpatialMixParams.init(rng, c, rank=config.lora_rank, dtype=dtype)
            if config.ffn == "channel_mix":
                ffn = ChannelMixParams.init(rng, c, dtype=dtype)
            else:
                ffn = MlpParams.init(rng, c, dtype=dtype)
            blocks.append(BlockParams(g1, b1, g2, b2, att, ffn))
        groups.append(GroupParams(blocks, _conv_init(rng, c, c, dtype)))

    n_stages = 1 if config.scale == 2 else 2
    ups = [_conv_init(rng, c, 4 * c, dtype) for _ in range(n_stages)]
    return ModelParams(
        conv1=_conv_init(rng, 1, c, dtype),
        conv2=_conv_init(rng, c, c, dtype),
        groups=groups,
        recon=_conv_init(rng, c, c, dtype),
        ups=ups,
        head=_conv_init(rng, c, 1, dtype, zero=True),
    )


# ---------------------------------------------------------------------------
# forward / backward

def _block_forward(feat, blk: BlockParams, direction, config, v_stream):
    """One scan block over a (C, H, W) feature map. Returns
    (feat_out, v_out_img or None, cache)."""
    c, h, w = feat.shape
    seq = orient(feat, direction)
    vp = None if v_stream is None else orient(v_stream, direction)
    t1, ln1_cache = layer_norm(seq, blk.ln1_gamma.value, blk.ln1_beta.value)
    att, v_out, att_cache = spatial_mix_forward(
        t1, blk.att, config.head_size, v_prev=vp
    )
    mid = seq + att
    t2, ln2_cache = layer_norm(mid, blk.ln2_gamma.value, blk.ln2_beta.value)
    if isinstance(blk.ffn, ChannelMixParams):
        ffn_out, ffn_cache = channel_mix_forward(t2, blk.ffn)
    else:
        ffn_out, ffn_cache = mlp_forward(t2, blk.ffn)
    out_seq = mid + ffn_out
    cache = dict(direction=direction, hw=(h, w), ln1=ln1_cache, ln2=ln2_cache,
                 att=att_cache, ffn=ffn_cache)
    return deorient(out_seq, direction, h, w), deorient(v_out, direction, h, w), cache


def _block_backward(d_feat, d_v_img, cache, blk: BlockParams):
    """Backward of _block_forward. d_v_img is the gradient on this block's
    outgoing value stream (None if unused). Returns (d_feat_in, d_v_prev_img)."""
    direction = cache["direction"]
    h, w = cache["hw"]
    d_out_seq = orient(d_feat, direction)
    d_v_out = (np.zeros_like(d_out_seq) if d_v_img is None
               else orient(d_v_img, direction))

    d_mid = d_out_seq
    if isinstance(blk.ffn, ChannelMixParams):
        d_t2 = channel_mix_backward(d_out_seq, cache["ffn"], blk.ffn)
    else:
        d_t2 = mlp_backward(d_out_seq, cache["ffn"], blk.ffn)
    d_mid2, d_g2, d_b2 = layer_norm_backward(d_t2, cache["ln2"])
    blk.ln2_gamma.grad += d_g2
    blk.ln2_beta.grad += d_b2
    d_mid = d_mid + d_mid2

    d_t1, d_vp = spatial_mix_backward(d_mid, d_v_out, cache["att"], blk.att)
    d_seq, d_g1, d_b1 = layer_norm_backward(d_t1, cache["ln1"])
    blk.ln1_gamma.grad += d_g1
    blk.ln1_beta.grad += d_b1
    d_seq = d_seq + d_mid

    d_feat_in = deorient(d_seq, direction, h, w)
    d_v_prev = None if d_vp is None else deorient(d_vp, direction, h, w)
    return d_feat_in, d_v_prev


def model_forward(lr_img: np.ndarray, params: ModelParams, config: ModelConfig):
    """Super-resolve a (1, H, W) image to (1, scale*H, scale*W).

    Returns (out, cache); callers that only infer can drop the cache.
    """
    if lr_img.ndim != 3 or lr_img.shape[0] != 1:
        raise ShapeError(f"expected (1, H, W) input, got {lr_img.shape}")
    h, w = lr_img.shape[1:]
    if h < 8 or w < 8:
        raise ShapeError(f"input {h}x{w} below the 8x8 minimum")

    x0 = normalize(lr_img, params.stats)
    f1 = conv2d(x0, params.conv1.w.value, params.conv1.b.value)
    f2 = conv2d(f1, params.conv2.w.value, params.conv2.b.value)

    directions = config.directions()
    deep = f2
    v_stream = None
    group_caches = []
    for grp in params.groups:
        gin = deep
        feat = gin
        block_caches = []
        v_next = None
        for i, blk in enumerate(grp.blocks):
            feat, v_out, bc = _block_forward(feat, blk, directions[i], config, v_stream)
            block_caches.append(bc)
            if i == len(grp.blocks) - 1:
                v_next = v_out
        gconv = conv2d(feat, grp.conv.w.value, grp.conv.b.value)
        group_caches.append(dict(gin=gin, blocks=block_caches, feat=feat))
        deep = gin + gconv
        v_stream = v_next

    recon = conv2d(deep, params.recon.w.value, params.recon.b.value)
    u = f1 + recon
    hi = u
    up_caches = []
    for cp in params.ups:
        pre = conv2d(hi, cp.w.value, cp.b.value)
        up_caches.append(dict(x=hi, pre=pre))
        hi = pixel_shuffle(pre, 2)
    out_n = conv2d(hi, params.head.w.value, params.head.b.value)
    out = denormalize(out_n, params.stats)
    check_finite(out, "model output")

    cache = dict(x0=x0, f1=f1, f2=f2, groups=group_caches, deep=deep, u=u,
                 ups=up_caches, hi=hi)
    return out, cache


def model_backward(d_out, cache, params: ModelParams, config: ModelConfig):
    """Accumulates parameter gradients; returns the input-image gradient."""
    d_out_n = d_out * params.stats.std
    d_hi, d_hw, d_hb = conv2d_backward(d_out_n, cache["hi"], params.head.w.value)
    params.head.w.grad += d_hw
    params.head.b.grad += d_hb
    for cp, uc in zip(reversed(params.ups), reversed(cache["ups"])):
        d_pre = pixel_shuffle_backward(d_hi, 2)
        d_hi, d_w, d_b = conv2d_backward(d_pre, uc["x"], cp.w.value)
        cp.w.grad += d_w
        cp.b.grad += d_b

    d_u = d_hi
    d_deep, d_rw, d_rb = conv2d_backward(d_u, cache["deep"], params.recon.w.value)
    params.recon.w.grad += d_rw
    params.recon.b.grad += d_rb

    d_stream = None  # grad w.r.t. the processed group's outgoing value stream
    for grp, gc in zip(reversed(params.groups), reversed(cache["groups"])):
        d_gin = d_deep
        d_feat, d_gw, d_gb = conv2d_backward(d_deep, gc["feat"], grp.conv.w.value)
        grp.conv.w.grad += d_gw
        grp.conv.b.grad += d_gb
        d_stream_prev = None
        last = len(grp.blocks) - 1
        for i in range(last, -1, -1):
            d_v_img = d_stream if i == last else None
            d_feat, d_vp = _block_backward(d_feat, d_v_img, gc["blocks"][i],
                                           grp.blocks[i])
            if d_vp is not None:
                d_stream_prev = d_vp if d_stream_prev is None else d_stream_prev + d_vp
        d_deep = d_gin + d_feat
        d_stream = d_stream_prev

    d_f1_2, d_w2, d_b2 = conv2d_backward(d_deep, cache["f1"], params.conv2.w.value)
    params.conv2.w.grad += d_w2
    params.conv2.b.grad += d_b2
    d_f1 = d_u + d_f1_2
    d_x0, d_w1, d_b1 = conv2d_backward(d_f1, cache["x0"], params.conv1.w.value)
    params.conv1.w.grad += d_w1
    params.conv1.b.grad += d_b1
    return d_x0 / params.stats.std


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"DWKV"
_VERSION = 1


def _checkpoint_tensors(params: ModelParams) -> dict:
    out = {name: gp.value for name, gp in params.pairs().items()}
    out["norm.mean"] = np.array([params.stats.mean], dtype=np.float32)
    out["norm.std"] = np.array([params.stats.std], dtype=np.float32)
    return out


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Write magic, version, config lines, then all tensors sorted by name
    as (name, rank, dims, f32 little-endian payload)."""
    tensors = _checkpoint_tensors(params)
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    cfg = config.to_lines().encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        t = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", t.ndim)
        blob += struct.pack(f"<{t.ndim}I", *t.shape)
        blob += t.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.off}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Read a checkpoint back into (params, config)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != _MAGIC:
        raise CheckpointError("bad magic: not a model checkpoint")
    ver = r.u32()
    if ver != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ver}")
    config = ModelConfig.from_lines(r.take(r.u32()).decode("utf-8"))
    n_tensors = r.u32()
    tensors = {}
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.off != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.off} trailing bytes at offset {r.off}")

    params = init_params(config, seed=0, dtype=np.float32)
    try:
        params.stats = NormStats(float(tensors.pop("norm.mean")[0]),
                                 float(tensors.pop("norm.std")[0]))
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing tensor {e.args[0]!r}") from None
    pairs = params.pairs()
    missing = sorted(set(pairs) - set(tensors))
    extra = sorted(set(tensors) - set(pairs))
    if missing or extra:
        raise CheckpointError(
            f"tensor set mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, gp in pairs.items():
        t = tensors[name]
        if t.shape != gp.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {t.shape}, expected {gp.value.shape}"
            )
        gp.value = t
    return params, config
