"""Losses, AdamW and the learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from graybox import ops
from graybox.ops import ConfigError
from graybox.tensor import Tensor


def infonce_loss(img: Tensor, txt: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over the N x N similarity matrix; row i pairs with column i."""
    n = img.dims[0]
    if n < 2:
        raise ConfigError("contrastive batch needs at least 2 pairs")
    if txt.dims != img.dims:
        raise ops.ShapeError(f"feature dims differ: {img.dims} vs {txt.dims}")
    logits = ops.scale(ops.matmul(img, ops.transpose(txt)), temperature)
    targets = np.arange(n)
    rows = ops.cross_entropy_logits(logits, targets)
    cols = ops.cross_entropy_logits(ops.transpose(logits), targets)
    return ops.scale(ops.add(rows, cols), 0.5)


def default_no_decay(name: str) -> bool:
    """Biases, gains and token-like parameters are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith(("_b", "_g")) or leaf in ("bias", "shift", "extra", "cls", "pos", "tok", "temperature"):
        return True
    return leaf.startswith("tokens") or leaf.startswith("prefix")


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_decay: Callable[[str], bool] = default_no_decay
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; names without a gradient are left untouched."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        out = dict(params)
        for name, g in grads.items():
            p = params[name]
            g = np.asarray(g, dtype=p.dtype)
            if g.shape != p.shape:
                raise ops.ShapeError(f"{name}: grad dims {g.shape} != param dims {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p - lr * update
            if self.weight_decay and not self.no_decay(name):
                new = new - lr * self.weight_decay * p
            out[name] = new.astype(p.dtype)
        return out


def lr_at(lr0: float, decay: float, lr_min: float, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return max(lr0 * decay**epoch, lr_min)
