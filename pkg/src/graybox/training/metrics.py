"""Retrieval and classification metrics with deterministic tie-breaking."""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from graybox.tensor import Tensor


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def positive_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; equal scores rank the lower column first."""
    sim = np.asarray(sim)
    n = sim.shape[0]
    pos = sim[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > pos) | ((sim == pos) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def recall_from_similarity(sim, ks: Sequence[int]) -> dict[int, float]:
    sim = _arr(sim)
    ranks = positive_ranks(sim)
    gallery = sim.shape[1]
    out = {}
    for k in ks:
        kk = k
        if k > gallery:
            warnings.warn(f"K={k} exceeds gallery size {gallery}; clamped", stacklevel=2)
            kk = gallery
        out[k] = float(np.mean(ranks < kk))
    return out


def evaluate_retrieval(img_feats, txt_feats, ks: Sequence[int] = (1, 5, 10), direction: str = "t2i") -> dict[int, float]:
    """Recall@K with item i of each side forming the positive pair.

    ``direction="t2i"`` queries with text rows against the image gallery.
    """
    img, txt = _arr(img_feats), _arr(txt_feats)
    sim = txt @ img.T if direction == "t2i" else img @ txt.T
    return recall_from_similarity(sim, ks)


def evaluate_classification(img_feats, class_feats, labels) -> dict[str, float]:
    """Top-1 (and top-5 when there are at least 5 classes) accuracy."""
    img, cls = _arr(img_feats), _arr(class_feats)
    labels = np.asarray(labels)
    sim = img @ cls.T
    n = len(labels)
    target = sim[np.arange(n), labels][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = ((sim > target) | ((sim == target) & (cols < labels[:, None]))).sum(axis=1)
    out = {"top1": float(np.mean(ahead < 1))}
    if sim.shape[1] >= 5:
        out["top5"] = float(np.mean(ahead < 5))
    return out
