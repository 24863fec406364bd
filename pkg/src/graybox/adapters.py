"""Client-side trainables: visual conv adapter, text shift/extra tokens, output
adapters and per-layer proxy tokens.

An :class:`AdapterSet` is a flat ``name -> float32 array`` mapping plus the
config that produced it.  Members switched off by the ablation mask are absent
from the mapping, so counts and checkpoints reflect the mask.  The ``apply_*``
functions take a mapping of :class:`Tensor` (possibly watched on a tape) so the
same code serves training and evaluation.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from graybox import ops
from graybox.ops import ConfigError
from graybox.tensor import DecodeError, Tensor, decode_tensor, encode_tensor

MASK_MEMBERS = ("in-vis", "in-txt", "out-vis", "out-txt", "lga")
DGA_MASK = frozenset({"in-vis", "in-txt", "out-vis", "out-txt"})
LP_MASK = frozenset({"out-vis", "out-txt"})
LGA_MASK = frozenset({"lga"})

WIDTH = 64
CHANNELS = 3
MAX_SEQ = 16
MAX_PREFIX = 64
ENCODERS = ("vision", "text")


class SequenceBudgetError(ValueError):
    """The prompt plus extra tokens does not fit in the text encoder's context."""


@dataclass(frozen=True)
class AdapterConfig:
    mask: frozenset = DGA_MASK
    n_extra: int = 1
    hidden: int = 16
    kernel: int = 3
    prefix_tokens: int = 1
    lga_encoders: tuple[str, ...] = ENCODERS
    lga_layers: tuple[int, ...] = (0, 1, 2, 3)
    width: int = WIDTH
    max_seq: int = MAX_SEQ

    def __post_init__(self):
        object.__setattr__(self, "mask", frozenset(self.mask))
        unknown = self.mask - set(MASK_MEMBERS)
        if unknown:
            raise ConfigError(f"unknown mask members {sorted(unknown)}")
        if self.n_extra < 0:
            raise ConfigError("n_extra must be >= 0")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if not 0 <= self.prefix_tokens <= MAX_PREFIX:
            raise ConfigError(f"prefix_tokens must be in [0, {MAX_PREFIX}] (sequence budget)")
        for enc in self.lga_encoders:
            if enc not in ENCODERS:
                raise ConfigError(f"unknown encoder {enc!r}")

    def with_mask(self, mask: Iterable[str]) -> AdapterConfig:
        return replace(self, mask=frozenset(mask))

    @property
    def extra_enabled(self) -> bool:
        return "in-txt" in self.mask and self.n_extra > 0


def visual_names(depth: int = 3) -> list[str]:
    return [f"vis.conv{i}.{part}" for i in range(depth) for part in ("kernel", "bias")]


@dataclass
class AdapterSet:
    config: AdapterConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def has(self, member: str) -> bool:
        return member in self.config.mask

    def prefix_names(self) -> dict[tuple[str, int], str]:
        return {(e, l): f"lga.{e}.{l}.tokens" for e in self.config.lga_encoders for l in self.config.lga_layers
                if self.has("lga") and self.config.prefix_tokens > 0}

    def copy(self) -> AdapterSet:
        return AdapterSet(self.config, {k: v.copy() for k, v in self.params.items()})


def _identity_conv_stack(channels: int, hidden: int, k: int) -> dict[str, np.ndarray]:
    """Delta kernels: copy the input channels into the first ``channels`` hidden
    maps, carry them through, then copy them back.  Exact identity."""
    c = k // 2
    k0 = np.zeros((hidden, channels, k, k), np.float32)
    k1 = np.zeros((hidden, hidden, k, k), np.float32)
    k2 = np.zeros((channels, hidden, k, k), np.float32)
    for i in range(channels):
        k0[i, i, c, c] = 1.0
        k2[i, i, c, c] = 1.0
    for i in range(hidden):
        k1[i, i, c, c] = 1.0
    return {
        "vis.conv0.kernel": k0, "vis.conv0.bias": np.zeros(hidden, np.float32),
        "vis.conv1.kernel": k1, "vis.conv1.bias": np.zeros(hidden, np.float32),
        "vis.conv2.kernel": k2, "vis.conv2.bias": np.zeros(channels, np.float32),
    }


def init_adapters(config: AdapterConfig | None = None, seed: int = 0) -> AdapterSet:
    cfg = config or AdapterConfig()
    rng = np.random.default_rng(seed)
    w = cfg.width
    p: dict[str, np.ndarray] = {}
    if "in-vis" in cfg.mask:
        p.update(_identity_conv_stack(CHANNELS, cfg.hidden, cfg.kernel))
    if "in-txt" in cfg.mask:
        p["txt.shift"] = np.zeros(w, np.float32)
        if cfg.n_extra:
            p["txt.extra"] = rng.normal(0.0, 0.02, (cfg.n_extra, w)).astype(np.float32)
    for side in ("vis", "txt"):
        if f"out-{side}" in cfg.mask:
            p[f"out_{side}.weight"] = np.eye(w, dtype=np.float32)
            p[f"out_{side}.bias"] = np.zeros(w, np.float32)
    if "lga" in cfg.mask and cfg.prefix_tokens:
        for enc in cfg.lga_encoders:
            for layer in cfg.lga_layers:
                p[f"lga.{enc}.{layer}.tokens"] = rng.normal(0.0, 0.02, (cfg.prefix_tokens, w)).astype(np.float32)
    return AdapterSet(cfg, p)


# -- application -------------------------------------------------------------------


def apply_visual(params: Mapping[str, Tensor], image: Tensor) -> Tensor:
    """Three conv layers, no activations: an affine map of the pixels.  [C,H,W] or [B,C,H,W]."""
    if "vis.conv0.kernel" not in params:
        return image
    x = image
    for i in range(3):
        x = ops.conv2d_same(x, params[f"vis.conv{i}.kernel"], params[f"vis.conv{i}.bias"])
    return x


def apply_textual(params: Mapping[str, Tensor], embeddings: Tensor, max_seq: int = MAX_SEQ) -> tuple[Tensor, int]:
    """Add the shift to every row and append the extra token(s) at the end.

    Works on [L, w] or [B, L, w].  Returns the new embeddings and the number of
    appended rows (which must not receive positional embeddings).
    """
    x = embeddings
    if "txt.shift" in params:
        x = ops.add(x, params["txt.shift"])
    extra = params.get("txt.extra")
    if extra is None:
        return x, 0
    k = extra.dims[0]
    L = x.dims[-2]
    if L + k > max_seq:
        raise SequenceBudgetError(
            f"prompt of {L} tokens plus {k} extra exceeds the {max_seq}-token context; "
            f"truncate the prompt to at most {max_seq - k} tokens"
        )
    if x.ndim == 3:
        extra = ops.expand(extra, x.dims[0])
    return ops.concat_rows([x, extra], axis=-2), k


def apply_output(params: Mapping[str, Tensor], feature: Tensor, side: str) -> Tensor:
    """``normalize(f @ W + b)`` for ``side`` in {"vis", "txt"}; identity if the member is masked."""
    w = params.get(f"out_{side}.weight")
    if w is None:
        return feature
    return ops.l2_normalize(ops.add(ops.matmul(feature, w), params[f"out_{side}.bias"]))


# -- accounting ----------------------------------------------------------------------


def count_trainable(adapters: AdapterSet, vault_params: int) -> dict[str, float]:
    n = int(sum(v.size for v in adapters.params.values()))
    return {"absolute": n, "fraction": n / vault_params if vault_params else 0.0}


def lora_param_count(r: int, blocks: int = 8, width: int = WIDTH) -> int:
    return blocks * 3 * 2 * width * r


def match_lora_rank(dga_count: int, blocks: int = 8, width: int = WIDTH) -> int:
    """Rank whose LoRA size (Q, K, V of every block) is closest to ``dga_count``; ties go to the smaller rank."""
    per = lora_param_count(1, blocks, width)
    if dga_count <= 0:
        warnings.warn("no adapter parameters to match; using LoRA rank 1", stacklevel=2)
        return 1
    lo = max(1, dga_count // per)
    return min((abs(lora_param_count(r, blocks, width) - dga_count), r) for r in (lo, lo + 1))[1]


# -- checkpoint -------------------------------------------------------------------------
# "GBA1", u32 member count, then per member: u16 name length, utf-8 name, tensor encoding.

MAGIC = b"GBA1"


def encode_adapters(adapters: AdapterSet) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(adapters.params))]
    for name in sorted(adapters.params):
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + encode_tensor(adapters.params[name]))
    return b"".join(parts)


def decode_adapters(buf: bytes, config: AdapterConfig | None = None) -> AdapterSet:
    if buf[:4] != MAGIC:
        raise DecodeError("bad adapter checkpoint magic", 0)
    if len(buf) < 8:
        raise DecodeError("truncated member count", 4)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    params = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise DecodeError("truncated member name", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        if pos + 2 + n > len(buf):
            raise DecodeError("truncated member name", pos)
        name = bytes(buf[pos + 2 : pos + 2 + n]).decode()
        t, pos = decode_tensor(buf, pos + 2 + n)
        params[name] = t.data.copy()
    if pos != len(buf):
        raise DecodeError("trailing bytes after last member", pos)
    return AdapterSet(config or infer_config(params), params)


def infer_config(params: Mapping[str, np.ndarray]) -> AdapterConfig:
    mask = set()
    if "vis.conv0.kernel" in params:
        mask.add("in-vis")
    if "txt.shift" in params:
        mask.add("in-txt")
    for side in ("vis", "txt"):
        if f"out_{side}.weight" in params:
            mask.add(f"out-{side}")
    prefix = [k for k in params if k.startswith("lga.")]
    kw = {}
    if prefix:
        mask.add("lga")
        kw["prefix_tokens"] = params[prefix[0]].shape[0]
        kw["lga_encoders"] = tuple(e for e in ENCODERS if any(k.startswith(f"lga.{e}.") for k in prefix))
        kw["lga_layers"] = tuple(sorted({int(k.split(".")[2]) for k in prefix}))
    if "txt.extra" in params:
        kw["n_extra"] = params["txt.extra"].shape[0]
    elif "in-txt" in mask:
        kw["n_extra"] = 0
    if "vis.conv0.kernel" in params:
        kw["hidden"] = params["vis.conv0.kernel"].shape[0]
        kw["kernel"] = params["vis.conv0.kernel"].shape[-1]
    return AdapterConfig(mask=frozenset(mask), **kw)


def save_adapters(adapters: AdapterSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_adapters(adapters))


def load_adapters(path, config: AdapterConfig | None = None) -> AdapterSet:
    with open(path, "rb") as fh:
        return decode_adapters(fh.read(), config)
