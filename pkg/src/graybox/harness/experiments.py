"""Experiment runner and ablation grids over the synthetic retrieval task.

Result tables are plain text, one row per method or configuration, R@K columns
as fractions.  Rows of :func:`run_experiment` are ordered by shade (black, dark
gray, light gray, white) and then by method; ablation tables keep grid order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from graybox.adapters import AdapterConfig, AdapterSet, init_adapters
from graybox.harness.data import (
    AFFINE_SHIFT, FREQUENCY_SHIFT, N_CLASSES, NO_SHIFT, Dataset, DomainShift, caption_ids, generate_dataset,
)
from graybox.training import (
    SHADE, GrayboxPipeline, LocalVaultClient, TrainConfig, TrainResult, WhiteboxModel, evaluate_classification,
    train,
)
from graybox.tensor import Tensor
from graybox.vault import AccessError, Vault

log = logging.getLogger(__name__)

SHIFTS = {"none": NO_SHIFT, "affine-pixel": AFFINE_SHIFT, "frequency": FREQUENCY_SHIFT}
SHADE_ORDER = ("black", "darkgray", "lightgray", "white")
METHOD_ORDER = ("zs", "lp", "dga", "lga", "lora", "llft", "ft")
# Learning rate and epoch count used for all desk-scale experiments.
EXPERIMENT_DEFAULTS = {"lr0": 1e-3, "epochs": 6}


def oracle_adapters(shift: DomainShift, config: AdapterConfig | None = None) -> AdapterSet:
    """Adapters that undo an affine pixel shift exactly: the first conv layer's
    centre tap holds the closed-form inverse 1x1 convolution, all else identity."""
    config = config or AdapterConfig(mask=frozenset({"in-vis"}))
    adapters = init_adapters(config)
    kernel, bias = shift.inverse_conv()
    p = dict(adapters.params)
    k0 = p["vis.conv0.kernel"].copy()
    b0 = p["vis.conv0.bias"].copy()
    c = k0.shape[-1] // 2
    k0[:3, :3, c, c] = kernel[:, :, 0, 0]
    b0[:3] = bias
    p["vis.conv0.kernel"], p["vis.conv0.bias"] = k0.astype(np.float32), b0.astype(np.float32)
    return AdapterSet(config, p)


# -- tables ------------------------------------------------------------------------------


@dataclass
class Row:
    name: str
    shade: str
    metrics: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    result: TrainResult | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class ResultTable:
    title: str
    columns: tuple[str, ...]
    rows: list[Row] = field(default_factory=list)

    def row(self, name: str) -> Row:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [len("method")]) + 2
        head = "method".ljust(width) + "shade".ljust(11) + "".join(c.rjust(8) for c in self.columns)
        lines = [self.title, head]
        for r in self.rows:
            start = r.name.ljust(width) + r.shade.ljust(11)
            if r.failed:
                lines.append(start + f"FAILED ({r.error})")
            else:
                lines.append(start + "".join(f"{r.metrics[c]:8.4f}" for c in self.columns))
        return "\n".join(lines) + "\n"


# -- experiment specs --------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    shift: str = "affine-pixel"
    methods: tuple[str, ...] = ("zs", "lp", "dga")
    configs: dict = field(default_factory=dict)  # method -> TrainConfig overriding the defaults
    n_train: int = 2048
    n_test: int = 512
    data_seed: int = 0
    seed: int = 0
    ks: tuple[int, ...] = (1, 5, 10)
    mode: str = "retrieval"  # or "classification"

    def config_for(self, method: str) -> TrainConfig:
        if method in self.configs:
            return self.configs[method]
        base = method.split("(")[0]
        return TrainConfig(method=method, seed=self.seed, eval_ks=self.ks,
                           **(EXPERIMENT_DEFAULTS if base != "zs" else {"epochs": 0}))

    def dataset(self) -> Dataset:
        return generate_dataset(self.n_train, self.n_test, SHIFTS[self.shift], seed=self.data_seed)


def _private_handle(vault: Vault, seed: int):
    """A throwaway copy of the backbone, so white-box rows cannot alter the shared vault."""
    owner = vault.owner_unlock(seed)
    return Vault(owner.parameters(), owner.seed, owner.config).owner_unlock(seed)


def _encoder(result: TrainResult, client, handle) -> Callable:
    if result.adapters is not None:
        pipe = GrayboxPipeline(client, result.adapters.config)
        return lambda images, captions: pipe.encode(result.adapters, images, captions)
    params = result.params
    downs = [v for k, v in params.items() if k.endswith(".down")]
    model = WhiteboxModel(handle, [k for k in params if not k.startswith("lora.")], downs[0].shape[1] if downs else 0)
    frozen = {k: Tensor._wrap(v) for k, v in handle.parameters().items() if k not in params}
    return lambda images, captions: model.encode(frozen, params, images, captions)


def classification_metrics(encode: Callable, data: Dataset) -> dict[str, float]:
    """Top-1/top-5 accuracy of test images against the 32 class prompts."""
    prompts = np.stack([caption_ids(c) for c in range(N_CLASSES)])
    _, class_feats = encode(data.test.images[:N_CLASSES], prompts)
    img_feats = np.concatenate([encode(data.test.images[i : i + N_CLASSES], data.test.captions[i : i + N_CLASSES])[0]
                                for i in range(0, len(data.test), N_CLASSES)])
    return evaluate_classification(img_feats, class_feats, data.test.classes)


def run_one(name: str, shade: str, config: TrainConfig, data: Dataset, client, vault: Vault | None,
            seed: int, mode: str, ks) -> Row:
    handle = None
    try:
        if config.method in ("ft", "llft", "lora"):
            if vault is None:
                raise AccessError(f"{config.method} needs owner access to the backbone")
            handle = _private_handle(vault, seed)
        result = train(config, data, client=client, handle=handle)
        if mode == "classification":
            metrics = classification_metrics(_encoder(result, client, handle), data)
        else:
            metrics = {f"R@{k}": result.history.final(f"R@{k}") for k in ks}
        return Row(name, shade, metrics, result=result)
    except Exception as e:  # a failing row must not take the table down
        log.warning("row %s failed: %s", name, e)
        return Row(name, shade, error=f"{type(e).__name__}: {e}")


def _persist(table: ResultTable, out_dir, stem: str) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    (out / "histories").mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(table.to_text())
    for r in table.rows:
        if r.result is not None:
            safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in r.name)
            (out / "histories" / f"{stem}-{safe}.txt").write_text(r.result.history.to_text())


def _columns(mode: str, ks) -> tuple[str, ...]:
    return ("top1", "top5") if mode == "classification" else tuple(f"R@{k}" for k in ks)


def run_experiment(spec: ExperimentSpec, vault: Vault, client=None, owner_seed: int | None = None,
                   out_dir=None, data: Dataset | None = None) -> ResultTable:
    """Train every method of ``spec`` and tabulate final test metrics.

    ``owner_seed`` unlocks white-box rows (each on a private backbone copy);
    without it those rows are marked failed.
    """
    client = client or LocalVaultClient(vault)
    data = data or spec.dataset()
    configs = {m: spec.config_for(m) for m in spec.methods}

    def order(m):
        base = configs[m].method
        return SHADE_ORDER.index(SHADE[base]), METHOD_ORDER.index(base), m

    title = f"shift={spec.shift} train={spec.n_train} test={spec.n_test} data_seed={spec.data_seed} seed={spec.seed}"
    table = ResultTable(title, _columns(spec.mode, spec.ks))
    for m in sorted(spec.methods, key=order):
        cfg = configs[m]
        table.rows.append(run_one(cfg.label, SHADE[cfg.method], cfg, data, client,
                                  vault if owner_seed is not None else None, owner_seed or 0, spec.mode, spec.ks))
    _persist(table, out_dir, "table")
    return table


# -- ablations ---------------------------------------------------------------------------

ADAPTER_COMBOS = (
    ("Original (ZS)", frozenset()),
    ("DGA-I-txt", frozenset({"in-txt"})),
    ("DGA-I-vis", frozenset({"in-vis"})),
    ("DGA-I", frozenset({"in-vis", "in-txt"})),
    ("DGA-O-txt", frozenset({"out-txt"})),
    ("DGA-O-vis", frozenset({"out-vis"})),
    ("DGA-O", frozenset({"out-vis", "out-txt"})),
    ("DGA-Text", frozenset({"in-txt", "out-txt"})),
    ("DGA-Vis", frozenset({"in-vis", "out-vis"})),
    ("DGA", frozenset({"in-vis", "in-txt", "out-vis", "out-txt"})),
)
SINGLE_ADAPTER_ROWS = ("DGA-I-txt", "DGA-I-vis", "DGA-O-txt", "DGA-O-vis")
EXTRA_TOKENS = (1, 2, 4, 8)
PROXY_COUNTS = (1, 2, 4, 8, 16)
PROXY_LAYERS = {"first-half": (0, 1), "second-half": (2, 3), "all": (0, 1, 2, 3)}
LLFT_DEPTHS = (1, 2, 4)
ABLATIONS = ("adapter-combos", "extra-token-count", "proxy-count", "proxy-layers", "last-layers")


def ablation_grid(kind: str, base: TrainConfig | None = None) -> list[tuple[str, TrainConfig]]:
    """The (row name, config) pairs of one ablation table."""
    base = base or TrainConfig(method="dga", **EXPERIMENT_DEFAULTS)
    if kind == "adapter-combos":
        return [(name, replace(base, method="dga" if mask else "zs", mask=mask, epochs=base.epochs if mask else 0))
                for name, mask in ADAPTER_COMBOS]
    if kind == "extra-token-count":
        return [(f"extra={k}", replace(base, method="dga", mask=None, n_extra=k)) for k in EXTRA_TOKENS]
    if kind == "proxy-count":
        return [(f"P={p}", replace(base, method="lga", mask=None, prefix_tokens=p)) for p in PROXY_COUNTS]
    if kind == "proxy-layers":
        return [(name, replace(base, method="lga", mask=None, lga_layers=layers))
                for name, layers in PROXY_LAYERS.items()]
    if kind == "last-layers":
        return [(f"llft({n})", replace(base, method="llft", mask=None, llft_n=n)) for n in LLFT_DEPTHS]
    raise ValueError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")


def ablation_suite(kind: str, data: Dataset, vault: Vault, client=None, owner_seed: int | None = None,
                   base: TrainConfig | None = None, out_dir=None, ks=(1, 5, 10)) -> ResultTable:
    client = client or LocalVaultClient(vault)
    grid = ablation_grid(kind, base)
    table = ResultTable(f"ablation={kind}", _columns("retrieval", ks))
    for name, cfg in grid:
        cfg = replace(cfg, eval_ks=tuple(ks))
        table.rows.append(run_one(name, SHADE[cfg.method], cfg, data, client,
                                  vault if owner_seed is not None else None, owner_seed or 0, "retrieval", ks))
    _persist(table, out_dir, f"ablation-{kind}")
    return table
