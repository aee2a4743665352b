"""Grayscale PNG/PGM image files with a float [0,1] array interface.

PNG goes through Pillow with fixed writer settings (same pixels, same
bytes); PGM (binary P5, 8 or 16 bit big-endian) is read and written
directly. 16-bit is the default depth so LR/HR pairs survive a save/load
round trip with quantization error below 1/65535. 8-bit output exists for
heatmaps and quick looks.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor_core import ShapeError


def to_quantized(img: np.ndarray, bits: int) -> np.ndarray:
    """Clip a float image to [0,1] and quantize to uint8/uint16 levels."""
    if bits not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bits}")
    maxval = (1 << bits) - 1
    levels = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    return levels.astype(np.uint8 if bits == 8 else np.uint16)


def from_quantized(arr: np.ndarray, maxval: int) -> np.ndarray:
    return (arr.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def _flatten_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 2:
        return img
    raise ShapeError(f"expected a (1, H, W) or (H, W) grayscale image, got {img.shape}")


def save_image(path, img: np.ndarray, bits: int = 16) -> None:
    """Write a [0,1] grayscale image as .png or .pgm (by suffix)."""
    path = str(path)
    q = to_quantized(_flatten_gray(img), bits)
    if path.endswith(".pgm"):
        h, w = q.shape
        maxval = (1 << bits) - 1
        payload = q.tobytes() if bits == 8 else q.astype(">u2").tobytes()
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload)
    elif path.endswith(".png"):
        # uint8 -> "L", uint16 -> "I;16" by dtype
        Image.fromarray(q).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image suffix in {path!r} (use .png or .pgm)")


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PGM header in {path!r}")
        tokens.append(data[start:pos])
    pos += 1    # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path!r}: only binary (P5) PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise ValueError(f"{path!r}: expected {need} pixel bytes, found {len(raw)}")
    return from_quantized(np.frombuffer(raw, dtype=dtype).reshape(h, w), maxval)[None]


def load_image(path) -> np.ndarray:
    """Read a .png or .pgm into float32 [0,1], shaped (1, H, W) for
    grayscale or (3, H, W) for RGB."""
    path = str(path)
    if path.endswith(".pgm"):
        return _read_pgm(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.uint16)
            return from_quantized(arr, 65535)[None]
        if im.mode == "L":
            return from_quantized(np.asarray(im), 255)[None]
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB"))
            return from_quantized(arr, 255).transpose(2, 0, 1)
        raise ValueError(f"{path!r}: unsupported image mode {im.mode}")
