"""Owner-mode pretraining of the vault on clean synthetic pairs, cached by seed."""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from graybox.harness.data import NO_SHIFT, generate_dataset
from graybox.tensor import Tensor
from graybox.training.loops import History, WhiteboxModel, _eval_records, _galleries
from graybox.training.optim import AdamW
from graybox.vault import Vault, VaultConfig, build_vault, load_vault

log = logging.getLogger(__name__)


class PretrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 128
    pairs_per_epoch: int = 2048
    max_epochs: int = 40
    target_r1: float = 0.95
    eval_pairs: int = 512
    data_seed: int = 100_003

    def key(self, seed: int) -> str:
        blob = repr(sorted(asdict(self).items())) + f"|seed={seed}|{VaultConfig()}"
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def cache_dir() -> Path:
    return Path(os.environ.get("GRAYBOX_CACHE", Path.home() / ".cache" / "graybox"))


def cache_path(seed: int, config: PretrainConfig) -> Path:
    return cache_dir() / f"vault-{seed}-{config.key(seed)}.gbv"


def pretrain_vault(seed: int = 42, config: PretrainConfig | None = None, use_cache: bool = True,
                   history: History | None = None) -> Vault:
    """Train all backbone parameters (temperature stays frozen) until the clean
    held-out R@1 reaches ``target_r1``; raise if ``max_epochs`` is hit first.
    Fresh pairs are rendered every epoch."""
    config = config or PretrainConfig()
    path = cache_path(seed, config)
    if use_cache and path.exists():
        vault = load_vault(path)
        log.info("vault cache hit %s (checksum %#x)", path, vault.checksum)
        return vault

    vault = build_vault(seed)
    handle = vault.owner_unlock(seed)
    names = handle.trainable_names()
    full = handle.parameters()
    params = {k: full[k] for k in names}
    frozen = {k: Tensor._wrap(v) for k, v in full.items() if k not in params}
    model = WhiteboxModel(handle, names)
    held_out = generate_dataset(32, config.eval_pairs, NO_SHIFT, seed=config.data_seed).test
    history = history if history is not None else History()
    opt = AdamW()
    step = 0
    reached = None
    for epoch in range(config.max_epochs):
        train = generate_dataset(config.pairs_per_epoch, 1, NO_SHIFT, seed=config.data_seed + 1 + epoch).train
        losses = []
        for g in _galleries(len(train)):
            lr = config.lr * min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else config.lr
            loss, grads = model.step(frozen, params, train.images[g], train.captions[g])
            params = opt.step(params, grads, lr)
            losses.append(loss)
            step += 1
        history.add(epoch + 1, "train", "loss", float(np.mean(losses)))
        feats = [model.encode(frozen, params, held_out.images[g], held_out.captions[g])
                 for g in _galleries(len(held_out))]
        _eval_records(history, epoch + 1, feats, (1,))
        r1 = history.final("R@1")
        log.info("pretrain epoch %d loss %.4f clean R@1 %.4f", epoch + 1, history.final("loss", "train"), r1)
        if r1 >= config.target_r1:
            reached = epoch + 1
            break
    if reached is None:
        raise PretrainError(
            f"clean R@1 {history.final('R@1'):.3f} below {config.target_r1} after {config.max_epochs} epochs; "
            "the pretraining configuration is too weak for this architecture"
        )
    handle.update(params)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        handle.save(tmp)
        os.replace(tmp, path)
    return vault
