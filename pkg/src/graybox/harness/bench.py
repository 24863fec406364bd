"""Shared-backbone vs separate-backbone inference cost.

Shared: one vault serves ``n_domains`` adapter pairs; each domain's share of the
samples passes through its own input adapters, the aggregated batch runs through
the vault once, and each share goes through its own output adapters.
Separate: ``n_domains`` full vault copies, each encoding the full sample set.

FLOPs are counted by the instrumented tensor ops (2 per multiply-add in matmul
and convolution; elementwise work is not counted) and checked against a closed
form from the architecture dimensions.  Memory is resident parameter bytes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graybox.adapters import DGA_MASK, AdapterConfig, apply_output, apply_textual, apply_visual, init_adapters
from graybox.harness.data import CAPTION_LEN, NO_SHIFT, generate_dataset
from graybox.tensor import Tensor, count_flops
from graybox.vault import (
    TEXT_EMBEDDINGS, TEXT_FEATURE, TEXT_TOKEN_IDS, VISION_FEATURE, VISION_PIXELS, VaultConfig, build_vault,
)

CHUNK = 50


def encoder_flops(cfg: VaultConfig, tokens: int) -> int:
    """One transformer encoder pass over ``tokens`` tokens, excluding stem and head."""
    w, m, n = cfg.width, cfg.mlp, tokens
    per_block = 2 * n * w * 3 * w + 2 * n * n * w * 2 + 2 * n * w * w + 2 * n * w * m * 2
    return cfg.layers * per_block


def vault_flops(cfg: VaultConfig, n_images: int, n_texts: int, text_len: int) -> int:
    """Closed-form FLOPs of the vault encoders.  ``text_len`` excludes the EOS the vault appends."""
    patch_dim = cfg.channels * cfg.patch * cfg.patch
    vision = 2 * cfg.n_patches * patch_dim * cfg.width + encoder_flops(cfg, cfg.n_patches + 1)
    vision += 2 * cfg.width * cfg.embed_dim
    text = encoder_flops(cfg, text_len + 1) + 2 * cfg.width * cfg.embed_dim
    return n_images * vision + n_texts * text


def adapter_flops(config: AdapterConfig, n: int, image_size: int, channels: int = 3) -> int:
    """Closed-form FLOPs of one adapter pair applied to ``n`` image/caption pairs."""
    total = 0
    if "in-vis" in config.mask:
        k2 = config.kernel**2
        h = config.hidden
        total += 2 * image_size * image_size * k2 * (channels * h + h * h + h * channels)
    for side in ("vis", "txt"):
        if f"out-{side}" in config.mask:
            total += 2 * config.width * config.width
    return n * total


def param_bytes(arrays) -> int:
    return int(sum(np.asarray(a).nbytes for a in arrays))


@dataclass
class BenchResult:
    n_domains: int
    n_samples: int
    flops_shared: int
    flops_separate: int
    analytic_shared: int
    analytic_separate: int
    mem_shared: int
    mem_separate: int

    @property
    def flop_ratio(self) -> float:
        return self.flops_separate / self.flops_shared

    @property
    def mem_ratio(self) -> float:
        return self.mem_separate / self.mem_shared

    @property
    def exact(self) -> bool:
        return self.flops_shared == self.analytic_shared and self.flops_separate == self.analytic_separate

    def as_dict(self) -> dict:
        return {
            "flops-shared": self.flops_shared, "flops-separate": self.flops_separate,
            "mem-shared": self.mem_shared, "mem-separate": self.mem_separate,
            "ratios": {"flops": self.flop_ratio, "mem": self.mem_ratio},
        }

    def to_text(self) -> str:
        return (
            f"domains={self.n_domains} samples={self.n_samples}\n"
            f"GFLOPs shared={self.flops_shared / 1e9:.3f} separate={self.flops_separate / 1e9:.3f} "
            f"ratio={self.flop_ratio:.3f} (analytic match: {self.exact})\n"
            f"MB shared={self.mem_shared / 2**20:.3f} separate={self.mem_separate / 2**20:.3f} "
            f"ratio={self.mem_ratio:.3f}\n"
        )


def _vault_pass(vault, entries: dict, text_free: int = 0) -> dict:
    s = vault.open_session()
    try:
        return vault.forward(s, entries, text_free)
    finally:
        vault.close_session(s)


def efficiency_bench(n_domains: int = 10, n_samples: int = 1000, seed: int = 0,
                     adapter_config: AdapterConfig | None = None) -> BenchResult:
    if n_domains < 1 or n_samples < n_domains or n_samples % n_domains:
        raise ValueError("n_samples must be a positive multiple of n_domains")
    acfg = adapter_config or AdapterConfig(mask=DGA_MASK)
    data = generate_dataset(n_samples, 1, NO_SHIFT, seed=seed).train
    images, captions = data.images[:n_samples], data.captions[:n_samples]
    share = n_samples // n_domains

    shared = build_vault(seed)
    adapters = [init_adapters(acfg, seed=seed + d) for d in range(n_domains)]
    emb_all = shared.embed_tokens(captions)
    text_free = 0
    with count_flops() as shared_count:
        for lo in range(0, n_samples, CHUNK):
            hi = min(lo + CHUNK, n_samples)
            pix, emb = [], []
            for d in range(lo // share, (hi - 1) // share + 1):
                a, b = max(lo, d * share), min(hi, (d + 1) * share)
                P = adapters[d].tensors()
                pix.append(apply_visual(P, Tensor(images[a:b])).data)
                e, text_free = apply_textual(P, Tensor(emb_all.data[a:b]), acfg.max_seq)
                emb.append(e.data)
            outs = _vault_pass(shared, {VISION_PIXELS: Tensor(np.concatenate(pix)),
                                        TEXT_EMBEDDINGS: Tensor(np.concatenate(emb))}, text_free)
            for d in range(lo // share, (hi - 1) // share + 1):
                a, b = max(lo, d * share) - lo, min(hi, (d + 1) * share) - lo
                P = adapters[d].tensors()
                apply_output(P, Tensor(outs[VISION_FEATURE].data[a:b]), "vis")
                apply_output(P, Tensor(outs[TEXT_FEATURE].data[a:b]), "txt")

    copies = [build_vault(seed + 1 + d) for d in range(n_domains)]
    ids = Tensor(captions.astype(np.float32))
    with count_flops() as separate_count:
        for v in copies:
            for lo in range(0, n_samples, CHUNK):
                _vault_pass(v, {VISION_PIXELS: Tensor(images[lo : lo + CHUNK]),
                                TEXT_TOKEN_IDS: Tensor(ids.data[lo : lo + CHUNK])})

    cfg = VaultConfig()
    extra = acfg.n_extra if "in-txt" in acfg.mask else 0
    analytic_shared = vault_flops(cfg, n_samples, n_samples, CAPTION_LEN + extra)
    analytic_shared += adapter_flops(acfg, n_samples, cfg.image_size, cfg.channels)
    analytic_separate = n_domains * vault_flops(cfg, n_samples, n_samples, CAPTION_LEN)
    vault_bytes = param_bytes(t.data for t in shared._params.values())
    adapter_bytes = param_bytes(adapters[0].params.values())
    return BenchResult(
        n_domains, n_samples,
        flops_shared=shared_count[0], flops_separate=separate_count[0],
        analytic_shared=analytic_shared, analytic_separate=analytic_separate,
        mem_shared=vault_bytes + n_domains * adapter_bytes,
        mem_separate=sum(param_bytes(t.data for t in v._params.values()) for v in copies),
    )
