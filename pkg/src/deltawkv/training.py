"""Desk-scale training: frequency-domain LR synthesis, dihedral augmentation,
L1 loss, Adam, a synthetic phantom dataset, and the training loop.

Defaults follow the reference recipe (batch 16, Adam(0.9, 0.99), fixed lr
1e-4, 20k iterations, no schedule); tests and the bundled experiments run
scaled-down versions of the same loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import psnr
from .model import (
    ModelConfig, ModelParams, NormStats, init_params, model_backward,
    model_forward,
)
from .tensor_core import GradPair, NonFiniteError, ShapeError


class DivergenceError(RuntimeError):
    """Training aborted: loss went non-finite or blew up."""


# abort when loss exceeds GROWTH_FACTOR x its value GROWTH_WINDOW iters ago
GROWTH_WINDOW = 100
GROWTH_FACTOR = 10.0


@dataclass
class ImagePair:
    """One LR/HR training pair; hr dims are scale x lr dims, values in [0,1].

    stats optionally carries the dataset statistics the pair was produced
    under, for callers that move pairs between datasets.
    """

    lr: np.ndarray
    hr: np.ndarray
    provenance: str = ""
    stats: NormStats | None = None

    def __post_init__(self):
        if self.lr.ndim != 3 or self.hr.ndim != 3:
            raise ShapeError("pairs hold (1, H, W) images")
        sh, sw = self.hr.shape[1:]
        h, w = self.lr.shape[1:]
        if sh % h or sw % w or sh // h != sw // w:
            raise ShapeError(
                f"hr {self.hr.shape} is not an integer multiple of lr {self.lr.shape}"
            )

    @property
    def scale(self) -> int:
        return self.hr.shape[1] // self.lr.shape[1]


@dataclass
class TrainConfig:
    batch: int = 16
    lr_rate: float = 1e-4
    betas: tuple = (0.9, 0.99)
    iters: int = 20_000
    seed: int = 0
    eps: float = 1e-8
    augment: bool = True
    crop: int | None = None    # LR-side square crop; None trains on full images
    log_every: int = 50

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr_rate <= 0:
            raise ValueError(f"lr_rate must be positive, got {self.lr_rate}")


# ---------------------------------------------------------------------------
# LR synthesis

def kspace_downsample(hr: np.ndarray, factor: int, clip: bool = True) -> np.ndarray:
    """Low-resolution image via the frequency domain: keep the centered
    (H/factor) x (W/factor) low-frequency block of the spectrum, invert on the
    coarse grid, scale by 1/factor^2, and (by default) clip to [0,1].

    clip=False exposes the linear pre-clipping path.
    """
    if hr.ndim != 3 or hr.shape[0] != 1:
        raise ShapeError(f"expected (1, H, W), got {hr.shape}")
    h, w = hr.shape[1:]
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by factor {factor}")
    hl, wl = h // factor, w // factor
    spec = np.fft.fftshift(np.fft.fft2(hr[0].astype(np.float64)))
    top = (h - hl) // 2
    left = (w - wl) // 2
    crop = spec[top:top + hl, left:left + wl]
    img = np.fft.ifft2(np.fft.ifftshift(crop)).real / (factor * factor)
    if clip:
        img = np.clip(img, 0.0, 1.0)
    return img[None]


def make_pair(hr: np.ndarray, scale: int, provenance: str = "") -> ImagePair:
    return ImagePair(lr=kspace_downsample(hr, scale).astype(hr.dtype),
                     hr=hr, provenance=provenance)


# ---------------------------------------------------------------------------
# augmentation

N_AUGMENTS = 8


def augment_image(img: np.ndarray, op_index: int) -> np.ndarray:
    """Dihedral transform op_index = flip_bit*4 + quarter_turns applied to a
    (C, H, W) image; rotation follows the [[1,2],[3,4]] -> [[3,1],[4,2]]
    quarter-turn convention, flip (left-right) happens before rotating."""
    if not 0 <= op_index < N_AUGMENTS:
        raise ValueError(f"op_index must be in [0, 8), got {op_index}")
    out = img[:, :, ::-1] if op_index >= 4 else img
    return np.rot90(out, k=-(op_index % 4), axes=(1, 2)).copy()


_INVERSE_OP = (0, 3, 2, 1, 4, 5, 6, 7)


def inverse_augment(op_index: int) -> int:
    """Index of the op undoing op_index (flipped ops are involutions)."""
    if not 0 <= op_index < N_AUGMENTS:
        raise ValueError(f"op_index must be in [0, 8), got {op_index}")
    return _INVERSE_OP[op_index]


def augment(pair: ImagePair, op_index: int) -> ImagePair:
    return ImagePair(lr=augment_image(pair.lr, op_index),
                     hr=augment_image(pair.hr, op_index),
                     provenance=pair.provenance, stats=pair.stats)


# ---------------------------------------------------------------------------
# loss and optimizer

def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its subgradient (sign(0) = 0).

    Returns (loss, d_pred).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"l1 shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    return loss, np.sign(diff) / diff.size


@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def init(cls, pairs: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.value) for k, p in pairs.items()},
                   v={k: np.zeros_like(p.value) for k, p in pairs.items()})


def adam_step(pairs: dict, state: AdamState, t: int, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update (t is 1-based) from each GradPair's
    accumulated gradient; updates values and moments in place."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in pairs.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.value = p.value - cfg.lr_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# synthetic data

def phantom_image(size: int, seed, index: int, noise_sigma: float = 0.01,
                  min_ellipses: int = 5, max_ellipses: int = 12) -> np.ndarray:
    """One deterministic MRI-like slice: nested random ellipses on a dark
    background, a smooth multiplicative bias field, and mild magnitude noise
    (Rician-like: magnitude of the signal plus complex Gaussian noise)."""
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = yy / (size - 1) * 2.0 - 1.0
    xx = xx / (size - 1) * 2.0 - 1.0
    img = np.zeros((size, size), dtype=np.float64)

    n_ell = int(rng.integers(min_ellipses, max_ellipses + 1)) if max_ellipses else 0
    for _ in range(n_ell):
        cy, cx = rng.uniform(-0.55, 0.55, size=2)
        ay, ax = rng.uniform(0.12, 0.75, size=2)
        theta = rng.uniform(0.0, np.pi)
        level = rng.uniform(0.15, 0.95)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        # nested look: later ellipses overwrite rather than add
        img[inside] = level

    if n_ell:
        gy, gx = rng.uniform(-1.0, 1.0, size=2)
        bias = 1.0 + 0.15 * (gy * yy + gx * xx) / 2.0
        img *= bias
    if noise_sigma > 0.0:
        re = img + rng.normal(0.0, noise_sigma, img.shape)
        im = rng.normal(0.0, noise_sigma, img.shape)
        img = np.sqrt(re * re + im * im)
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def phantom_dataset(n: int, size: int, seed,
                    noise_sigma: float = 0.01,
                    min_ellipses: int = 5, max_ellipses: int = 12) -> list:
    """n deterministic HR phantoms; image i depends only on (seed, i)."""
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    return [phantom_image(size, seed, i, noise_sigma, min_ellipses, max_ellipses)
            for i in range(n)]


# ---------------------------------------------------------------------------
# training loop

def _random_crop(pair: ImagePair, crop: int, rng) -> ImagePair:
    s = pair.scale
    h, w = pair.lr.shape[1:]
    if crop > min(h, w):
        raise ShapeError(f"crop {crop} exceeds LR size {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return ImagePair(
        lr=pair.lr[:, top:top + crop, left:left + crop],
        hr=pair.hr[:, s * top:s * (top + crop), s * left:s * (left + crop)],
        provenance=pair.provenance, stats=pair.stats,
    )


def evaluate_psnr(params: ModelParams, config: ModelConfig, pairs) -> float:
    """Mean PSNR of the model over a list of pairs."""
    vals = []
    for pair in pairs:
        out, _ = model_forward(pair.lr, params, config)
        vals.append(psnr(np.clip(out, 0.0, 1.0), pair.hr))
    return float(np.mean(vals))


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, pairs,
               val_pairs=None, params: ModelParams | None = None,
               on_log=None):
    """Train on LR/HR pairs with L1 + Adam at a fixed learning rate.

    Returns (params, history); history rows are dicts with iter, loss, and
    (at logging points, when val_pairs is given) mean validation PSNR.
    on_log, if given, is called with each history row as it is appended.
    Aborts with DivergenceError if the loss goes non-finite or grows 10x
    over 100 iterations. Deterministic for a fixed seed; iters=0 returns the
    fresh model untouched.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    if params is None:
        params = init_params(model_cfg, seed=train_cfg.seed)
        params.stats = NormStats.from_images([p.hr for p in pairs])
    flat = params.pairs()
    state = AdamState.init(flat)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    window = []    # last 100 losses for the divergence check

    for it in range(1, train_cfg.iters + 1):
        idx = rng.integers(0, len(pairs), size=train_cfg.batch)
        batch = []
        for i in idx:
            pair = pairs[int(i)]
            if train_cfg.crop is not None:
                pair = _random_crop(pair, train_cfg.crop, rng)
            if train_cfg.augment:
                pair = augment(pair, int(rng.integers(0, N_AUGMENTS)))
            batch.append(pair)

        params.zero_grad()
        loss = 0.0
        try:
            for pair in batch:
                out, cache = model_forward(pair.lr, params, model_cfg)
                item_loss, d_out = l1_loss(out, pair.hr)
                loss += item_loss / train_cfg.batch
                model_backward(d_out / train_cfg.batch, cache, params, model_cfg)
        except NonFiniteError as e:
            raise DivergenceError(f"at iteration {it}: {e}") from e

        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at iteration {it}")
        window.append(loss)
        if len(window) > GROWTH_WINDOW:
            old = window.pop(0)
            if loss > GROWTH_FACTOR * old:
                raise DivergenceError(
                    f"loss grew from {old:.3g} to {loss:.3g} within "
                    f"{GROWTH_WINDOW} iterations (at iteration {it})"
                )

        adam_step(flat, state, it, train_cfg)

        if it % train_cfg.log_every == 0 or it == train_cfg.iters:
            row = {"iter": it, "loss": loss}
            if val_pairs:
                row["psnr"] = evaluate_psnr(params, model_cfg, val_pairs)
            history.append(row)
            if on_log is not None:
                on_log(row)

    return params, history
