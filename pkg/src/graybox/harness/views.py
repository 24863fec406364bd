"""Dump what the visual input adapter does to images.

For each image three binary PPM (P6, 8-bit) files are written: the original,
the adapter output renormalized to the original's mean and standard deviation,
and both side by side.  Pixel values map to bytes as ``round(255 * x)`` clamped
to [0, 255].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from graybox.adapters import AdapterSet, apply_visual
from graybox.tensor import Tensor


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[3, H, W] float image -> [H, W, 3] uint8."""
    return np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def ppm_bytes(image: np.ndarray) -> bytes:
    rgb = to_bytes(image)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def read_ppm(path) -> np.ndarray:
    """Parse files written by :func:`ppm_bytes` back into [H, W, 3] uint8."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 file")
    w, h = map(int, dims.split())
    return np.frombuffer(body, np.uint8).reshape(h, w, 3)


def renormalize(view: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Shift and scale ``view`` to the mean and std of ``reference`` (over all pixels and channels)."""
    view = np.asarray(view, np.float64)
    reference = np.asarray(reference, np.float64)
    sd = view.std()
    if sd == 0:
        return np.full_like(view, reference.mean())
    if np.array_equal(view, reference):
        return view
    return (view - view.mean()) / sd * reference.std() + reference.mean()


def dump_adapter_views(adapters: AdapterSet, images: np.ndarray, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    images = np.asarray(images, np.float32)
    adapted = apply_visual(adapters.tensors(), Tensor(images)).data
    written = []
    for i, (orig, view) in enumerate(zip(images, adapted)):
        view = renormalize(view, orig)
        pair = np.concatenate([orig, view], axis=-1)
        for tag, img in (("original", orig), ("adapted", view), ("pair", pair)):
            path = out / f"{i:03d}_{tag}.ppm"
            path.write_bytes(ppm_bytes(img))
            written.append(path)
    return written
