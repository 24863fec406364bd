"""Training loops.

Gray-box loops (``dga``, ``lga``, ``lp``) reach the backbone only through a
:class:`~graybox.training.client.VaultClient`: every step runs the input
adapters on a client tape, ships the adapted entries to the vault, applies the
output adapters on a second tape, backpropagates the loss to the vault outputs,
asks the vault for entry gradients and finishes the chain on the client.

White-box loops (``ft``, ``llft``, ``lora``) use the owner handle.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from graybox import ops
from graybox.adapters import (
    DGA_MASK, LGA_MASK, LP_MASK, AdapterConfig, AdapterSet, apply_output, apply_textual, apply_visual,
    init_adapters, match_lora_rank,
)
from graybox.ops import ConfigError
from graybox.tensor import Tape, Tensor, backward
from graybox.training.client import TransportError, VaultClient
from graybox.training.metrics import recall_from_similarity
from graybox.training.optim import AdamW, infonce_loss, lr_at
from graybox.vault import (
    TEXT_EMBEDDINGS, TEXT_FEATURE, TEXT_TOKEN_IDS, VISION_FEATURE, VISION_PIXELS, AccessError,
    WhiteBoxHandle, prefix_entry_id,
)

log = logging.getLogger(__name__)

# CLIP's published logit scale; the vault freezes the same value.
TEMPERATURE = 1 / 0.07
GALLERY = 32

METHODS = ("zs", "lp", "dga", "lga", "lora", "llft", "ft")
SHADE = {"zs": "black", "lp": "black", "dga": "darkgray", "lga": "lightgray",
         "lora": "white", "llft": "white", "ft": "white"}
DEFAULT_MASK = {"zs": frozenset(), "lp": LP_MASK, "dga": DGA_MASK, "lga": LGA_MASK}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "dga"
    lr0: float = 1e-4
    decay: float = 0.93
    lr_min: float = 1e-6
    epochs: int = 10
    batch: int = 32
    seed: int = 0
    mask: frozenset | None = None
    prefix_tokens: int = 1
    n_extra: int = 1
    lga_encoders: tuple[str, ...] = ("vision", "text")
    lga_layers: tuple[int, ...] = (0, 1, 2, 3)
    lora_r: int | None = None
    llft_n: int = 1
    weight_decay: float = 0.01
    eval_ks: tuple[int, ...] = (1, 5, 10)
    retries: int = 2

    def __post_init__(self):
        m = re.fullmatch(r"llft\((\d+)\)", self.method)
        if m:
            object.__setattr__(self, "method", "llft")
            object.__setattr__(self, "llft_n", int(m.group(1)))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.mask is not None:
            object.__setattr__(self, "mask", frozenset(self.mask))
        if self.epochs < 0 or self.batch < 2:
            raise ConfigError("epochs must be >= 0 and batch >= 2")

    @property
    def label(self) -> str:
        return f"llft({self.llft_n})" if self.method == "llft" else self.method

    def adapter_config(self) -> AdapterConfig:
        mask = self.mask if self.mask is not None else DEFAULT_MASK.get(self.method, frozenset())
        return AdapterConfig(mask=mask, n_extra=self.n_extra, prefix_tokens=self.prefix_tokens,
                             lga_encoders=tuple(self.lga_encoders), lga_layers=tuple(self.lga_layers))

    # key=value text form ------------------------------------------------------------

    def to_kv(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "method":
                v = self.label
            elif f.name == "mask" and v is not None and not v:
                v = "none"  # an explicitly empty mask; a blank value means the method default
            elif isinstance(v, (frozenset, tuple)):
                v = ",".join(str(x) for x in (sorted(v) if isinstance(v, frozenset) else v))
            elif v is None:
                v = ""
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str, **overrides) -> TrainConfig:
        kinds = {f.name: f for f in fields(cls)}
        values: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, val)
        values.update(overrides)
        return cls(**values)


def _parse_value(key: str, val: str):
    if key == "method":
        return val
    if key == "mask":
        if not val:
            return None
        return frozenset() if val == "none" else frozenset(v for v in val.split(",") if v)
    if key in ("lga_encoders",):
        return tuple(v for v in val.split(",") if v)
    if key in ("lga_layers", "eval_ks"):
        return tuple(int(v) for v in val.split(",") if v)
    if key == "lora_r":
        return int(val) if val else None
    if key in ("lr0", "decay", "lr_min", "weight_decay"):
        return float(val)
    return int(val)


# -- metric history ---------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    epoch: int
    split: str
    metric: str
    value: float

    def line(self) -> str:
        return f"epoch={self.epoch} split={self.split} metric={self.metric} value={self.value!r}"


class History(list):
    """Ordered metric records; text form is one ``key=value`` record per line."""

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.append(Record(epoch, split, metric, float(value)))

    def to_text(self) -> str:
        return "".join(r.line() + "\n" for r in self)

    @classmethod
    def from_text(cls, text: str) -> History:
        h = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            kv = dict(part.split("=", 1) for part in line.split())
            h.add(int(kv["epoch"]), kv["split"], kv["metric"], float(kv["value"]))
        return h

    def series(self, metric: str, split: str = "test") -> list[float]:
        return [r.value for r in self if r.metric == metric and r.split == split]

    def final(self, metric: str, split: str = "test") -> float:
        s = self.series(metric, split)
        if not s:
            raise KeyError(f"no {split}/{metric} records")
        return s[-1]


@dataclass
class TrainResult:
    config: TrainConfig
    history: History
    adapters: AdapterSet | None = None
    params: dict[str, np.ndarray] | None = None
    checksum_before: int | None = None
    checksum_after: int | None = None


# -- batching ------------------------------------------------------------------------------


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle gallery-sized blocks (each holds every class once), then chunk."""
    blocks = [np.arange(i, min(i + GALLERY, n)) for i in range(0, n, GALLERY)]
    order = np.concatenate([blocks[i] for i in rng.permutation(len(blocks))])
    out = [order[i : i + batch] for i in range(0, n, batch)]
    return [b for b in out if len(b) >= 2]


def _galleries(n: int) -> list[slice]:
    return [slice(i, min(i + GALLERY, n)) for i in range(0, n, GALLERY)]


def _check_loss(loss: Tensor, where: str) -> float:
    v = loss.item()
    if not math.isfinite(v):
        raise TrainingError(f"non-finite loss {v} at {where}")
    return v


def _eval_records(history: History, epoch: int, feats: Sequence[tuple[np.ndarray, np.ndarray]], ks) -> None:
    """Recall@K (text -> image) averaged over galleries, weighted by gallery size, plus mean loss."""
    total = sum(len(i) for i, _ in feats)
    rec = {k: 0.0 for k in ks}
    loss = 0.0
    for img, txt in feats:
        r = recall_from_similarity(txt @ img.T, [min(k, len(img)) for k in ks])
        for k, kk in zip(ks, [min(k, len(img)) for k in ks]):
            rec[k] += r[kk] * len(img)
        if len(img) >= 2:
            loss += infonce_loss(Tensor(img), Tensor(txt), TEMPERATURE).item() * len(img)
    for k in ks:
        history.add(epoch, "test", f"R@{k}", rec[k] / total)
    history.add(epoch, "test", "loss", loss / total)


# -- gray-box pipeline -------------------------------------------------------------------------


class GrayboxPipeline:
    """Adapters + sealed vault, reached through a client."""

    def __init__(self, client: VaultClient, config: AdapterConfig):
        self.client = client
        self.config = config
        self.needs_entry_grads = bool(config.mask & {"in-vis", "in-txt", "lga"})
        self._rows: dict[int, np.ndarray] = {}

    def embed(self, captions: np.ndarray) -> Tensor:
        """Token embeddings for ``captions``; each distinct id is fetched from the
        vault once and reused, so steady-state steps carry no embedding traffic."""
        ids = np.asarray(captions, dtype=np.int64)
        missing = sorted(set(np.unique(ids).tolist()) - self._rows.keys())
        if missing:
            # one id per row keeps each sequence within the vault's context length
            rows = self.client.embed(np.asarray(missing).reshape(-1, 1)).data.reshape(len(missing), -1)
            self._rows.update(zip(missing, rows))
        rows = np.stack([self._rows[i] for i in ids.ravel().tolist()])
        return Tensor(rows.reshape(ids.shape + rows.shape[-1:]))

    def _entries(self, P: Mapping[str, Tensor], images: np.ndarray, captions: np.ndarray, names):
        # inputs follow the adapters' precision (float64 adapters give a float64 vault pass)
        dtype = next(iter(P.values())).dtype if P else np.float32
        xa = apply_visual(P, Tensor(np.asarray(images, dtype=dtype)))
        entries: dict[int, Tensor] = {VISION_PIXELS: xa}
        text_free = 0
        ea = None
        if "in-txt" in self.config.mask:
            ea, text_free = apply_textual(P, Tensor(self.embed(captions).data.astype(dtype)), self.config.max_seq)
            entries[TEXT_EMBEDDINGS] = ea
        else:
            entries[TEXT_TOKEN_IDS] = Tensor(np.asarray(captions, dtype=np.float32))
        for (enc, layer), name in names.items():
            entries[prefix_entry_id(enc, layer)] = P[name]
        return entries, xa, ea, text_free

    def _call(self, entries, text_free, out_grads_fn=None):
        sess = self.client.open_session()
        try:
            outs = self.client.forward(sess, entries, text_free)
            if out_grads_fn is None:
                return outs, None
            out_grads, extra = out_grads_fn(outs)
            entry_grads = self.client.backward(sess, out_grads) if self.needs_entry_grads else {}
            return extra, entry_grads
        finally:
            self.client.close_session(sess)

    def encode(self, adapters: AdapterSet, images: np.ndarray, captions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        P = adapters.tensors()
        entries, _, _, text_free = self._entries(P, images, captions, adapters.prefix_names())
        outs, _ = self._call(entries, text_free)
        img = apply_output(P, outs[VISION_FEATURE], "vis")
        txt = apply_output(P, outs[TEXT_FEATURE], "txt")
        return img.data, txt.data

    def step(self, adapters: AdapterSet, images: np.ndarray, captions: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        names = adapters.prefix_names()
        tin = Tape()
        P = {k: tin.watch(v) for k, v in adapters.params.items()}
        entries, xa, ea, text_free = self._entries(P, images, captions, names)
        out_names = [k for k in adapters.params if k.startswith("out_")]

        def output_side(outs):
            tout = Tape()
            fv = tout.watch(outs[VISION_FEATURE])
            ft = tout.watch(outs[TEXT_FEATURE])
            Q = {k: tout.watch(adapters.params[k]) for k in out_names}
            loss = infonce_loss(apply_output(Q, fv, "vis"), apply_output(Q, ft, "txt"), TEMPERATURE)
            value = _check_loss(loss, "gray-box step")
            g = backward(tout, 1.0, output=loss)
            grads = {k: g[Q[k]].data for k in out_names}
            return {VISION_FEATURE: g[fv], TEXT_FEATURE: g[ft]}, (value, grads)

        (loss, grads), entry_grads = self._call(entries, text_free, output_side)
        seeds = {}
        if "in-vis" in self.config.mask:
            seeds[xa] = entry_grads[VISION_PIXELS]
        if ea is not None:
            seeds[ea] = entry_grads[TEXT_EMBEDDINGS]
        if seeds:
            g = backward(tin, seeds)
            for k in adapters.params:
                if k.startswith(("vis.", "txt.")):
                    grads[k] = g[P[k]].data
        for (enc, layer), name in names.items():
            grads[name] = entry_grads[prefix_entry_id(enc, layer)].data
        return loss, grads


def _eval_graybox(pipe: GrayboxPipeline, adapters: AdapterSet, split) -> list[tuple[np.ndarray, np.ndarray]]:
    return [pipe.encode(adapters, split.images[g], split.captions[g]) for g in _galleries(len(split.captions))]


def _run_graybox(client: VaultClient, data, config: TrainConfig) -> TrainResult:
    acfg = config.adapter_config()
    adapters = init_adapters(acfg, config.seed)
    pipe = GrayboxPipeline(client, acfg)
    checksum = getattr(client, "checksum", None)
    before = checksum() if checksum else None
    history = History()
    _eval_records(history, 0, _eval_graybox(pipe, adapters, data.test), config.eval_ks)
    opt = AdamW(weight_decay=config.weight_decay)
    epochs = config.epochs if adapters.params else 0
    for epoch in range(epochs):
        lr = lr_at(config.lr0, config.decay, config.lr_min, epoch)
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for idx in _batches(len(data.train.captions), config.batch, rng):
            loss, grads = _with_retries(
                lambda: pipe.step(adapters, data.train.images[idx], data.train.captions[idx]), config.retries)
            losses.append(loss)
            adapters.params = opt.step(adapters.params, grads, lr)
        history.add(epoch + 1, "train", "loss", float(np.mean(losses)))
        _eval_records(history, epoch + 1, _eval_graybox(pipe, adapters, data.test), config.eval_ks)
        log.info("%s epoch %d train loss %.4f test R@1 %.4f", config.label, epoch + 1,
                 history.final("loss", "train"), history.final("R@1"))
    after = checksum() if checksum else None
    if before is not None and before != after:
        raise TrainingError(f"vault checksum changed during gray-box training: {before:#x} -> {after:#x}")
    return TrainResult(config, history, adapters=adapters, checksum_before=before, checksum_after=after)


def _with_retries(fn, retries: int):
    for attempt in range(retries + 1):
        try:
            return fn()
        except TransportError:
            if attempt == retries:
                raise


def train_dga(client: VaultClient, data, config: TrainConfig | None = None) -> TrainResult:
    config = config or TrainConfig(method="dga")
    if config.method not in ("dga", "lp", "zs"):
        raise ConfigError(f"train_dga cannot run method {config.method!r}")
    if "lga" in config.adapter_config().mask:
        raise ConfigError("proxy tokens need the light-gray entry points; use train_lga")
    return _run_graybox(client, data, config)


def train_lga(client: VaultClient, data, config: TrainConfig | None = None) -> TrainResult:
    config = config or TrainConfig(method="lga")
    if config.method != "lga":
        raise ConfigError(f"train_lga cannot run method {config.method!r}")
    return _run_graybox(client, data, config)


def evaluate_adapters(client: VaultClient, adapters: AdapterSet, data, ks=(1, 5, 10)) -> History:
    """Test-split metrics of a fixed adapter set (recorded as epoch 0)."""
    history = History()
    _eval_records(history, 0, _eval_graybox(GrayboxPipeline(client, adapters.config), adapters, data.test), ks)
    return history


def evaluate_zero_shot(client: VaultClient, data, ks=(1, 5, 10)) -> History:
    return _run_graybox(client, data, TrainConfig(method="zs", epochs=0, eval_ks=tuple(ks))).history


# -- white-box --------------------------------------------------------------------------------


class WhiteboxModel:
    """Owner-side differentiable model over a parameter dict (+ optional LoRA factors)."""

    def __init__(self, handle: WhiteBoxHandle, trainable: Iterable[str], lora_r: int = 0):
        self.handle = handle
        self.trainable = list(trainable)
        self.lora_r = lora_r
        cfg = handle.config
        self.blocks = [f"{enc}.blocks.{i}" for enc in ("vision", "text") for i in range(cfg.layers)]

    def init_lora(self, seed: int) -> dict[str, np.ndarray]:
        if not self.lora_r:
            return {}
        rng = np.random.default_rng([seed, 7])
        w, r = self.handle.config.width, self.lora_r
        out = {}
        for b in self.blocks:
            for m in "qkv":
                out[f"lora.{b}.{m}.down"] = rng.normal(0.0, 1.0 / np.sqrt(w), (w, r)).astype(np.float32)
                out[f"lora.{b}.{m}.up"] = np.zeros((r, w), np.float32)
        return out

    def _lora(self, T: Mapping[str, Tensor]):
        if not self.lora_r:
            return None
        delta = {}
        for b in self.blocks:
            parts = [ops.matmul(T[f"lora.{b}.{m}.down"], T[f"lora.{b}.{m}.up"]) for m in "qkv"]
            delta[b] = ops.concat_rows(parts, axis=-1)  # alpha = r, so the alpha/r scale is 1
        return delta

    def features(self, T, images: np.ndarray, captions: np.ndarray) -> tuple[Tensor, Tensor]:
        lora = self._lora(T)
        img = self.handle.encode_image(T, Tensor(images), lora=lora)
        txt = self.handle.encode_text(T, self.handle.embed(T, captions), lora=lora)
        return img, txt

    def step(self, frozen: Mapping[str, Tensor], params: Mapping[str, np.ndarray], images, captions):
        tape = Tape()
        T = dict(frozen)
        watched = {k: tape.watch(params[k]) for k in params}
        T.update(watched)
        img, txt = self.features(T, images, captions)
        loss = infonce_loss(img, txt, TEMPERATURE)
        value = _check_loss(loss, "white-box step")
        g = backward(tape, 1.0, output=loss)
        return value, {k: g[t].data for k, t in watched.items()}

    def encode(self, frozen, params, images, captions):
        T = dict(frozen)
        T.update({k: Tensor(v) for k, v in params.items()})
        img, txt = self.features(T, images, captions)
        return img.data, txt.data


def train_whitebox(handle: WhiteBoxHandle | None, data, config: TrainConfig, client: VaultClient | None = None) -> TrainResult:
    """``ft``, ``llft(n)``, ``lora`` need the owner handle; ``lp`` runs sealed through ``client``."""
    if config.method == "lp":
        if client is None:
            raise ConfigError("linear probing runs through a vault client")
        return train_dga(client, data, config)
    if config.method not in ("ft", "llft", "lora"):
        raise ConfigError(f"train_whitebox cannot run method {config.method!r}")
    if not isinstance(handle, WhiteBoxHandle):
        raise AccessError(f"{config.method} needs owner access to the backbone")
    full = handle.parameters()
    if config.method == "ft":
        names = handle.trainable_names()
        r = 0
    elif config.method == "llft":
        names = handle.last_layers(config.llft_n)
        r = 0
    else:
        names = []
        r = config.lora_r or match_lora_rank(_dga_count(config), blocks=2 * handle.config.layers)
    model = WhiteboxModel(handle, names, r)
    params = {k: full[k] for k in names}
    params.update(model.init_lora(config.seed))
    frozen = {k: Tensor._wrap(v) for k, v in full.items() if k not in params}
    before = handle._vault.checksum
    history = History()

    def evaluate(epoch):
        feats = [model.encode(frozen, params, data.test.images[g], data.test.captions[g])
                 for g in _galleries(len(data.test.captions))]
        _eval_records(history, epoch, feats, config.eval_ks)

    evaluate(0)
    opt = AdamW(weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        lr = lr_at(config.lr0, config.decay, config.lr_min, epoch)
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for idx in _batches(len(data.train.captions), config.batch, rng):
            loss, grads = model.step(frozen, params, data.train.images[idx], data.train.captions[idx])
            losses.append(loss)
            params = opt.step(params, grads, lr)
        history.add(epoch + 1, "train", "loss", float(np.mean(losses)))
        evaluate(epoch + 1)
        log.info("%s epoch %d train loss %.4f test R@1 %.4f", config.label, epoch + 1,
                 history.final("loss", "train"), history.final("R@1"))
    after = before
    if config.method in ("ft", "llft") and config.epochs:
        after = handle.update({k: params[k] for k in names})
    return TrainResult(config, history, params=params, checksum_before=before, checksum_after=after)


def _dga_count(config: TrainConfig) -> int:
    a = init_adapters(replace(config, method="dga", mask=None).adapter_config(), config.seed)
    return int(sum(v.size for v in a.params.values()))


def train(method_config: TrainConfig, data, client: VaultClient | None = None,
          handle: WhiteBoxHandle | None = None) -> TrainResult:
    """Dispatch on ``config.method``."""
    m = method_config.method
    if m in ("zs", "dga", "lp"):
        if client is None:
            raise ConfigError(f"{m} needs a vault client")
        return train_dga(client, data, method_config)
    if m == "lga":
        if client is None:
            raise ConfigError("lga needs a vault client")
        return train_lga(client, data, method_config)
    return train_whitebox(handle, data, method_config, client)
