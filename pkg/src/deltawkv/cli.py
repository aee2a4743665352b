"""Operator surface: one binary with subcommands for the whole workflow.

phantom    synthesize deterministic HR test images
make-lr    frequency-domain downsampling of an image folder
train      fit a model, write a checkpoint and a CSV loss log
sr         super-resolve one image with a trained checkpoint
eval       PSNR/SSIM over a folder, optionally against a bicubic baseline
gradcheck  finite-difference audit of the hand-written backward pass
bench      kernel throughput, with a correctness gate before timing

Exit codes: 0 success, 1 usage/config error (also a failed gradcheck),
2 runtime abort (training divergence, kernel mismatch in bench).
Diagnostics go to stderr; data goes to stdout or to the requested files.

Run configs are UTF-8 ``key=value`` lines, the same grammar a checkpoint
embeds, so one file fully describes an experiment. Flags override file
values; unknown keys are rejected by name.
"""

from __future__ import annotations

import argparse
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .imageio import load_image, save_image, to_quantized
from .metrics import bicubic_upsample, error_heatmap, evaluate_pair, rgb_to_y
from .model import (
    CheckpointError, ConfigError, ModelConfig, load_checkpoint, model_forward,
    save_checkpoint,
)
from .tensor_core import NonFiniteError, ShapeError
from .training import (
    DivergenceError, ImagePair, TrainConfig, kspace_downsample, make_pair,
    phantom_dataset, train_loop,
)
from .verification import DEFAULT_STEP, DEFAULT_THRESHOLD, gradcheck_model
from .wkv import delta_sequence_chunked, delta_sequence_naive, random_projections


class CliError(ValueError):
    """Bad flags, bad config, or unusable input files."""


class KernelMismatchError(RuntimeError):
    """Bench equivalence gate failed; timing numbers would be meaningless."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; here that code is
    # reserved for runtime aborts, so route them through CliError instead
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# config plumbing

_MC = ModelConfig()
_TC = TrainConfig()


def _to_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _to_opt_int(v: str):
    return None if v.strip().lower() == "none" else int(v)


_MODEL_KEYS = {
    "channels": int, "residual_groups": int, "blocks_per_group": int,
    "head_size": int, "scale": int, "lora_rank": int, "ffn": str, "scan": str,
}
_TRAIN_KEYS = {
    "batch": int, "lr_rate": float, "iters": int, "seed": int, "eps": float,
    "augment": _to_bool, "crop": _to_opt_int, "log_every": int,
    "beta1": float, "beta2": float,
}


def _read_config(path) -> dict:
    """key=value lines -> raw string dict; grammar errors name the line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    raw = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"bad config line {line!r} (expected key=value)")
        k, _, v = line.partition("=")
        raw[k.strip()] = v.strip()
    return raw


def _split_config(raw: dict):
    """Raw strings -> (model kwargs, train kwargs); unknown keys rejected."""
    model_kw, train_kw = {}, {}
    for k, v in raw.items():
        if k in _MODEL_KEYS:
            dest, conv = model_kw, _MODEL_KEYS[k]
        elif k in _TRAIN_KEYS:
            dest, conv = train_kw, _TRAIN_KEYS[k]
        else:
            raise CliError(f"unknown config key {k!r}")
        try:
            dest[k] = conv(v)
        except ValueError as e:
            raise CliError(f"bad value for config key {k!r}: {v!r} ({e})") from e
    return model_kw, train_kw


_UNSET = object()   # --crop none is a real override, so None can't mark "not given"


def _resolve_configs(args):
    """Config file plus flag overrides -> (ModelConfig, TrainConfig)."""
    raw = _read_config(args.config) if args.config else {}
    model_kw, train_kw = _split_config(raw)
    for key in (*_MODEL_KEYS, *_TRAIN_KEYS):
        v = getattr(args, key, None)
        if key == "crop":
            if v is not _UNSET:
                train_kw[key] = v
        elif v is not None:
            (model_kw if key in _MODEL_KEYS else train_kw)[key] = v
    beta1 = train_kw.pop("beta1", _TC.betas[0])
    beta2 = train_kw.pop("beta2", _TC.betas[1])
    return ModelConfig(**model_kw), TrainConfig(betas=(beta1, beta2), **train_kw)


def _check_threads(args) -> None:
    if getattr(args, "threads", 1) != 1:
        raise CliError(
            "only --threads 1 is available: every path runs in the "
            "deterministic single-threaded reference mode"
        )


# ---------------------------------------------------------------------------
# file helpers

_IMG_SUFFIXES = (".png", ".pgm")


def _list_images(d) -> list:
    d = Path(d)
    if not d.is_dir():
        raise CliError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in _IMG_SUFFIXES)


def _load_gray(path) -> np.ndarray:
    """Image file -> (1, H, W) float32 in [0,1], RGB reduced to luma."""
    try:
        img = load_image(path)
    except OSError as e:
        raise CliError(f"cannot read image {path}: {e}") from e
    return rgb_to_y(img)


def _fmt_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def _open_out(path):
    """Text sink for CSV data: the given file, or stdout when path is None."""
    if path is None:
        return sys.stdout, False
    return open(path, "w", encoding="utf-8"), True


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args) -> int:
    _check_threads(args)
    if args.n < 0:
        raise CliError(f"--n must be >= 0, got {args.n}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = phantom_dataset(args.n, args.size, args.seed,
                             noise_sigma=args.noise_sigma)
    for i, img in enumerate(images):
        save_image(out / f"phantom_{i:04d}.png", img, bits=16)
    print(f"wrote {len(images)} phantoms ({args.size}x{args.size}) to {out}",
          file=sys.stderr)
    return 0


def cmd_make_lr(args) -> int:
    _check_threads(args)
    paths = _list_images(args.in_dir)
    if not paths:
        raise CliError(f"no images in {args.in_dir}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        lr = kspace_downsample(_load_gray(p), args.scale)
        save_image(out / p.name, lr, bits=16)
    print(f"downsampled {len(paths)} images x{args.scale} into {out}",
          file=sys.stderr)
    return 0


def _load_pairs(data_dir, scale: int) -> list:
    """Pairs from <dir>/hr (or <dir> itself) plus optional <dir>/lr.

    An lr/ file with the same name takes priority over synthesizing the LR
    image in the frequency domain.
    """
    root = Path(data_dir)
    hr_dir = root / "hr" if (root / "hr").is_dir() else root
    lr_dir = root / "lr"
    hr_paths = _list_images(hr_dir)
    if not hr_paths:
        raise CliError(f"no images in {hr_dir}")
    pairs = []
    for p in hr_paths:
        hr = _load_gray(p)
        lp = lr_dir / p.name
        if lp.is_file():
            pair = ImagePair(lr=_load_gray(lp), hr=hr, provenance=p.name)
        else:
            pair = make_pair(hr, scale, provenance=p.name)
        if pair.scale != scale:
            raise CliError(
                f"{p.name}: pair scale {pair.scale} != model scale {scale}"
            )
        pairs.append(pair)
    return pairs


def cmd_train(args) -> int:
    _check_threads(args)
    model_cfg, train_cfg = _resolve_configs(args)
    pairs = _load_pairs(args.data_dir, model_cfg.scale)
    val_pairs = None
    if args.val_count:
        if args.val_count >= len(pairs):
            raise CliError(
                f"--val-count {args.val_count} leaves no training images "
                f"(dataset has {len(pairs)})"
            )
        val_pairs = pairs[-args.val_count:]
        pairs = pairs[:-args.val_count]

    def show(row):
        msg = f"iter {row['iter']} loss {row['loss']:.6f}"
        if "psnr" in row:
            msg += f" val_psnr {_fmt_psnr(row['psnr'])}"
        print(msg, file=sys.stderr)

    t0 = time.perf_counter()
    params, history = train_loop(model_cfg, train_cfg, pairs, val_pairs,
                                 on_log=show)
    out_parent = Path(args.out).parent
    if out_parent != Path(""):
        out_parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, model_cfg, args.out)

    log_path = args.log if args.log else f"{args.out}.log.csv"
    log_parent = Path(log_path).parent
    if log_parent != Path(""):
        log_parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as f:
        f.write("iter,loss,psnr\n")
        for row in history:
            p = _fmt_psnr(row["psnr"]) if "psnr" in row else ""
            f.write(f"{row['iter']},{row['loss']:.8g},{p}\n")
    print(f"saved checkpoint to {args.out} and log to {log_path} "
          f"({time.perf_counter() - t0:.1f}s)", file=sys.stderr)
    return 0


def _super_resolve(lr: np.ndarray, params, config) -> np.ndarray:
    out, _ = model_forward(lr.astype(np.float32), params, config)
    return np.clip(out, 0.0, 1.0)


def cmd_sr(args) -> int:
    _check_threads(args)
    params, config = load_checkpoint(args.model)
    lr = _load_gray(args.in_path)
    out = _super_resolve(lr, params, config)
    out_path = Path(args.out)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out_path, out, bits=16)
    print(f"super-resolved {args.in_path} x{config.scale} -> {out_path}",
          file=sys.stderr)
    if args.heatmap:
        ref = _load_gray(args.heatmap)
        hm = error_heatmap(out, ref)
        hm_path = out_path.with_name(Path(args.in_path).stem + "_err.png")
        save_image(hm_path, hm, bits=8)
        print(f"error heatmap -> {hm_path}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    _check_threads(args)
    if (args.pred_dir is None) == (args.model is None):
        raise CliError("choose exactly one of --pred-dir or --model")
    if args.model is not None and args.lr_dir is None:
        raise CliError("--model needs --lr-dir to super-resolve from")
    if args.baseline and args.lr_dir is None:
        raise CliError("--baseline bicubic needs --lr-dir")

    hr_paths = _list_images(args.hr_dir)
    if not hr_paths:
        raise CliError(f"no images in {args.hr_dir}")
    if args.model is not None:
        params, config = load_checkpoint(args.model)

    def sibling(d, name):
        p = Path(d) / name
        if not p.is_file():
            raise CliError(f"missing {p}")
        return p

    header = "file,psnr,ssim"
    if args.baseline:
        header += ",bicubic_psnr,bicubic_ssim"
    rows = []
    psnrs, ssims, bp, bs = [], [], [], []
    for hp in hr_paths:
        hr = _load_gray(hp)
        if args.pred_dir is not None:
            pred = _load_gray(sibling(args.pred_dir, hp.name))
        else:
            pred = _super_resolve(_load_gray(sibling(args.lr_dir, hp.name)),
                                  params, config)
        rep = evaluate_pair(pred, hr)
        psnrs.append(rep.psnr_db)
        ssims.append(rep.ssim)
        row = f"{hp.name},{_fmt_psnr(rep.psnr_db)},{rep.ssim:.6f}"
        if args.baseline:
            lr = _load_gray(sibling(args.lr_dir, hp.name))
            if hr.shape[1] % lr.shape[1]:
                raise CliError(f"{hp.name}: hr dims not a multiple of lr dims")
            base = np.clip(bicubic_upsample(lr, hr.shape[1] // lr.shape[1]),
                           0.0, 1.0)
            brep = evaluate_pair(base, hr)
            bp.append(brep.psnr_db)
            bs.append(brep.ssim)
            row += f",{_fmt_psnr(brep.psnr_db)},{brep.ssim:.6f}"
        rows.append(row)

    mean = f"mean,{_fmt_psnr(float(np.mean(psnrs)))},{float(np.mean(ssims)):.6f}"
    if args.baseline:
        mean += f",{_fmt_psnr(float(np.mean(bp)))},{float(np.mean(bs)):.6f}"
    sink, close = _open_out(args.csv)
    try:
        sink.write(header + "\n")
        for row in rows:
            sink.write(row + "\n")
        sink.write(mean + "\n")
    finally:
        if close:
            sink.close()
    print(f"evaluated {len(rows)} images: {mean}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    _check_threads(args)
    config = ModelConfig(
        channels=args.channels, residual_groups=1,
        blocks_per_group=args.blocks_per_group, head_size=args.head_size,
        scale=args.scale, lora_rank=args.lora_rank, ffn=args.ffn,
        scan=args.scan,
    )
    report = gradcheck_model(config, seed=args.seed, step=args.step,
                             threshold=args.threshold, jitter=args.jitter,
                             only=args.only)
    print(f"checked {report.n_scope} tensors "
          f"(step {args.step:g}, threshold {report.threshold:g})")
    for name, rel, ok in report.rows():
        print(f"{name:<44} {rel:12.3e} {'ok' if ok else 'FAIL'}")
    if report.passed:
        print(f"PASS worst {report.worst_rel:.3e} ({report.worst_name})")
    else:
        print(f"FAIL {len(report.failures)} over threshold: "
              + ", ".join(report.failures))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("name,rel_error,ok\n")
            for name, rel, ok in report.rows():
                f.write(f"{name},{rel:.6e},{int(ok)}\n")
    return 0 if report.passed else 1


_BENCH_TOL = {"f32": 1e-5, "f64": 1e-10}
_BENCH_DTYPE = {"f32": np.float32, "f64": np.float64}


def cmd_bench(args) -> int:
    _check_threads(args)
    if args.reps < 1:
        raise CliError(f"--reps must be >= 1, got {args.reps}")
    if args.channels % args.head_size:
        raise CliError(
            f"channels {args.channels} not divisible by head_size {args.head_size}"
        )
    heads = args.channels // args.head_size
    rng = np.random.default_rng(args.seed)
    p = random_projections(rng, args.T, heads, args.head_size,
                           dtype=_BENCH_DTYPE[args.dtype])

    def run_naive():
        return delta_sequence_naive(p)

    def run_chunked():
        return delta_sequence_chunked(p, chunk_len=args.chunk_len)

    # correctness gate first: timings of a wrong kernel are meaningless
    y_n, s_n = run_naive()
    y_c, s_c = run_chunked()
    scale = max(float(np.abs(y_n).max()), float(np.abs(s_n).max()), 1e-12)
    gap = max(float(np.abs(y_c - y_n).max()),
              float(np.abs(s_c - s_n).max())) / scale
    tol = _BENCH_TOL[args.dtype]
    if gap > tol:
        raise KernelMismatchError(
            f"chunked vs naive max rel gap {gap:.3e} exceeds {tol:g}"
        )
    print(f"equivalence ok: max rel gap {gap:.3e} (tol {tol:g})",
          file=sys.stderr)

    run = run_chunked if args.kernel == "chunked" else run_naive
    times = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    tps = args.T / statistics.median(times)

    sink, close = _open_out(args.csv)
    try:
        sink.write("kernel,T,C,median_tps\n")
        sink.write(f"{args.kernel},{args.T},{args.channels},{tps:.1f}\n")
    finally:
        if close:
            sink.close()
    print(f"{args.kernel}: median {tps:.0f} tokens/s over {args.reps} reps",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_threads(sub) -> None:
    sub.add_argument("--threads", type=int, default=1, metavar="N",
                     help="worker threads; only 1 (the deterministic "
                          "reference mode) is available (default: 1)")


def _add_model_flags(sub) -> None:
    g = sub.add_argument_group("model config (overrides --config)")
    g.add_argument("--channels", type=int, metavar="C",
                   help=f"feature channels (default: {_MC.channels})")
    g.add_argument("--residual-groups", type=int, metavar="N",
                   help=f"residual groups (default: {_MC.residual_groups})")
    g.add_argument("--blocks-per-group", type=int, metavar="N",
                   help=f"blocks per group (default: {_MC.blocks_per_group})")
    g.add_argument("--head-size", type=int, metavar="D",
                   help=f"attention head size (default: {_MC.head_size})")
    g.add_argument("--scale", type=int, choices=(2, 4),
                   help=f"upsampling factor (default: {_MC.scale})")
    g.add_argument("--lora-rank", type=int, metavar="R",
                   help=f"low-rank projection width (default: {_MC.lora_rank})")
    g.add_argument("--ffn", choices=("channel_mix", "mlp"),
                   help=f"feed-forward variant (default: {_MC.ffn})")
    g.add_argument("--scan", choices=("quad", "forward_only"),
                   help=f"scan-direction schedule (default: {_MC.scan})")


def _add_train_flags(sub) -> None:
    g = sub.add_argument_group("training config (overrides --config)")
    g.add_argument("--batch", type=int, metavar="B",
                   help=f"minibatch size (default: {_TC.batch})")
    g.add_argument("--lr-rate", type=float, metavar="LR",
                   help=f"learning rate (default: {_TC.lr_rate})")
    g.add_argument("--iters", type=int, metavar="N",
                   help=f"optimizer steps (default: {_TC.iters})")
    g.add_argument("--seed", type=int, metavar="S",
                   help=f"run seed (default: {_TC.seed})")
    g.add_argument("--eps", type=float, metavar="E",
                   help=f"Adam epsilon (default: {_TC.eps})")
    g.add_argument("--augment", type=_to_bool, metavar="on|off",
                   help=f"dihedral augmentation (default: {str(_TC.augment).lower()})")
    g.add_argument("--crop", type=_to_opt_int, default=_UNSET, metavar="PX|none",
                   help=f"LR-side square crop (default: {_TC.crop})")
    g.add_argument("--log-every", type=int, metavar="N",
                   help=f"iterations between log rows (default: {_TC.log_every})")
    g.add_argument("--beta1", type=float, metavar="B1",
                   help=f"Adam beta1 (default: {_TC.betas[0]})")
    g.add_argument("--beta2", type=float, metavar="B2",
                   help=f"Adam beta2 (default: {_TC.betas[1]})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="deltawkv",
        description="Train, run, and audit a delta-rule super-resolution model.",
        epilog="exit codes: 0 success, 1 usage/config error, 2 runtime abort",
    )
    subs = parser.add_subparsers(dest="cmd", metavar="COMMAND")

    p = subs.add_parser("phantom", help="synthesize deterministic HR test images",
                        description="Write n synthetic HR phantoms as 16-bit PNGs.")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=64,
                   help="square image size in pixels (default: 64)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")
    p.add_argument("--noise-sigma", type=float, default=0.01,
                   help="magnitude-noise level (default: 0.01)")
    p.add_argument("--out-dir", required=True, help="output directory")
    _add_threads(p)
    p.set_defaults(func=cmd_phantom)

    p = subs.add_parser("make-lr", help="downsample a folder in the frequency domain",
                        description="Write the low-frequency-truncated LR version "
                                    "of every PNG/PGM in a folder.")
    p.add_argument("--scale", type=int, choices=(2, 4), required=True,
                   help="downsampling factor")
    p.add_argument("--in-dir", required=True, help="HR input directory")
    p.add_argument("--out-dir", required=True, help="LR output directory")
    _add_threads(p)
    p.set_defaults(func=cmd_make_lr)

    p = subs.add_parser("train", help="fit a model and write a checkpoint",
                        description="Train on <data-dir>/hr (plus optional "
                                    "<data-dir>/lr; otherwise LR images are "
                                    "synthesized in the frequency domain) and "
                                    "write the checkpoint plus a CSV loss log.")
    p.add_argument("--config", metavar="FILE",
                   help="key=value config file (default: none)")
    p.add_argument("--data-dir", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", metavar="FILE",
                   help="CSV log path (default: <out>.log.csv)")
    p.add_argument("--val-count", type=int, default=0, metavar="N",
                   help="hold out the last N images for PSNR logging (default: 0)")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_threads(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("sr", help="super-resolve one image",
                        description="Load a checkpoint and super-resolve one "
                                    "image; deterministic for fixed inputs.")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", dest="in_path", required=True, metavar="IMG",
                   help="input image (PNG/PGM; RGB is reduced to luma)")
    p.add_argument("--out", required=True, help="output PNG path (16-bit)")
    p.add_argument("--heatmap", metavar="REF",
                   help="also write an error heatmap vs this reference image "
                        "as <input-stem>_err.png next to --out (default: none)")
    _add_threads(p)
    p.set_defaults(func=cmd_sr)

    p = subs.add_parser("eval", help="PSNR/SSIM over a folder",
                        description="Per-image and mean PSNR/SSIM (luma channel) "
                                    "as CSV. Predictions either come from a "
                                    "checkpoint applied to --lr-dir or from "
                                    "precomputed images in --pred-dir; files "
                                    "are matched to --hr-dir by name.")
    p.add_argument("--hr-dir", required=True, help="reference HR directory")
    p.add_argument("--model", help="checkpoint path (needs --lr-dir)")
    p.add_argument("--lr-dir", help="LR input directory")
    p.add_argument("--pred-dir", help="precomputed prediction directory")
    p.add_argument("--csv", metavar="FILE",
                   help="CSV output path (default: stdout)")
    p.add_argument("--baseline", choices=("bicubic",),
                   help="also score this baseline from --lr-dir (default: none)")
    _add_threads(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference audit of backward",
                        description="Check every parameter gradient of a micro "
                                    "model against central finite differences. "
                                    "Exit 0 on pass, 1 on any failure.")
    p.add_argument("--channels", type=int, default=8,
                   help="feature channels, <= 16 (default: 8)")
    p.add_argument("--head-size", type=int, default=4,
                   help="attention head size (default: 4)")
    p.add_argument("--blocks-per-group", type=int, default=4,
                   help="blocks in the single group (default: 4)")
    p.add_argument("--lora-rank", type=int, default=2,
                   help="low-rank projection width (default: 2)")
    p.add_argument("--scale", type=int, choices=(2, 4), default=2,
                   help="upsampling factor (default: 2)")
    p.add_argument("--ffn", choices=("channel_mix", "mlp"), default="channel_mix",
                   help="feed-forward variant (default: channel_mix)")
    p.add_argument("--scan", choices=("quad", "forward_only"), default="quad",
                   help="scan-direction schedule (default: quad)")
    p.add_argument("--seed", type=int, default=0, help="init seed (default: 0)")
    p.add_argument("--step", type=float, default=DEFAULT_STEP,
                   help=f"finite-difference step (default: {DEFAULT_STEP:g})")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help=f"max allowed relative error (default: {DEFAULT_THRESHOLD:g})")
    p.add_argument("--jitter", type=float, default=0.2,
                   help="parameter perturbation so zero-init paths carry "
                        "gradient; 0 audits the literal fresh init (default: 0.2)")
    p.add_argument("--only", action="append", metavar="SUBSTR",
                   help="restrict to parameters whose name contains this; "
                        "repeatable (default: all)")
    p.add_argument("--csv", metavar="FILE",
                   help="also write name,rel_error,ok rows here (default: none)")
    _add_threads(p)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("bench", help="kernel throughput with a correctness gate",
                        description="Verify chunked == naive on the bench inputs, "
                                    "then report median tokens/second as CSV "
                                    "(kernel,T,C,median_tps).")
    p.add_argument("--kernel", choices=("naive", "chunked"), default="chunked",
                   help="kernel to time (default: chunked)")
    p.add_argument("--T", type=int, default=4096, help="sequence length (default: 4096)")
    p.add_argument("--channels", type=int, default=96,
                   help="total channels (default: 96)")
    p.add_argument("--head-size", type=int, default=16,
                   help="key/value width per head (default: 16)")
    p.add_argument("--reps", type=int, default=20,
                   help="timed repetitions, median reported (default: 20)")
    p.add_argument("--chunk-len", type=int, default=32,
                   help="chunk length for the chunked kernel (default: 32)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32",
                   help="input precision (default: f32)")
    p.add_argument("--seed", type=int, default=0, help="input seed (default: 0)")
    p.add_argument("--csv", metavar="FILE",
                   help="CSV output path (default: stdout)")
    _add_threads(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except SystemExit as e:   # argparse --help
        return int(e.code or 0)
    except (DivergenceError, KernelMismatchError, NonFiniteError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 2
    except (CliError, ConfigError, CheckpointError, ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
