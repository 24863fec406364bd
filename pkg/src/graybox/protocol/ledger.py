"""Exposure ledger and the audit that turns it into a Table-1-style row.

A ledger line records one frame crossing the boundary::

    conn=3 dir=c2s type=FORWARD_REQ bytes=49184 shapes=32x3x32x32;32x6 entries=0,1

``bytes`` is the full frame size, so summing the column reproduces the traffic
exactly.  ``entries`` lists the entry ids (requests, gradient replies) or output
tags carried by the frame.
"""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

from graybox.protocol.wire import HEADER, SCHEMA, Message, MsgType
from graybox.tensor import encoded_size
from graybox.vault import Modality, Vault, make_descriptors, param_shapes

# Field kinds that could carry backbone weights if they appeared in a schema.
WEIGHT_BEARING_KINDS = frozenset({"parameters", "weights", "parameter-block", "state-dict", "checkpoint"})
# Everything the schema is allowed to contain.
PERMITTED_KINDS = frozenset({
    "entry-descriptors", "token-ids", "embeddings-of-requested-ids", "session-id", "text-free-count",
    "entry-activations", "output-features", "output-gradients", "entry-gradients", "error-code", "error-text",
})


@dataclass(frozen=True)
class LedgerEntry:
    conn: int
    direction: str  # "c2s" or "s2c"
    type: MsgType
    nbytes: int
    shapes: tuple[tuple[int, ...], ...] = ()
    keys: tuple[str, ...] = ()

    def line(self) -> str:
        shapes = ";".join("x".join(map(str, s)) if s else "scalar" for s in self.shapes) or "-"
        keys = ",".join(self.keys) or "-"
        return f"conn={self.conn} dir={self.direction} type={self.type.name} bytes={self.nbytes} shapes={shapes} entries={keys}"

    @classmethod
    def parse(cls, line: str) -> "LedgerEntry":
        kv = dict(tok.split("=", 1) for tok in line.split())
        shapes = () if kv["shapes"] == "-" else tuple(
            () if s == "scalar" else tuple(int(d) for d in s.split("x")) for s in kv["shapes"].split(";"))
        keys = () if kv["entries"] == "-" else tuple(kv["entries"].split(","))
        if kv["dir"] not in ("c2s", "s2c"):
            raise ValueError(f"bad direction {kv['dir']!r}")
        return cls(int(kv["conn"]), kv["dir"], MsgType[kv["type"]], int(kv["bytes"]), shapes, keys)


class ExposureLedger:
    """Append-only, thread-safe record of frames exchanged over one or more connections."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, conn: int, direction: str, msg: Message, nbytes: int) -> None:
        if msg.type == MsgType.DESCRIBE_RSP:
            shapes = tuple(d.shape for d in msg.descriptors)
            keys = tuple(str(d.id) for d in msg.descriptors)
        else:
            shapes = tuple(t.dims for t in msg.tensors())
            keys = tuple(str(k) for k, _ in msg.items)
        with self._lock:
            self._entries.append(LedgerEntry(conn, direction, msg.type, nbytes, shapes, keys))

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def total_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries())

    def to_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.entries())

    @classmethod
    def from_text(cls, text: str) -> "ExposureLedger":
        led = cls()
        led._entries = [LedgerEntry.parse(ln) for ln in text.splitlines() if ln.strip()]
        return led


# -- audit -------------------------------------------------------------------------------


def schema_weight_fields() -> dict[MsgType, tuple[str, ...]]:
    """Fields of any message type that could carry weights.  Empty when sealed."""
    out = {}
    for mtype, kinds in SCHEMA.items():
        bad = tuple(k for k in kinds if k in WEIGHT_BEARING_KINDS or k not in PERMITTED_KINDS)
        if bad:
            out[mtype] = bad
    return out


def parameter_block_lengths(vault: Vault) -> set[int]:
    """Byte lengths of every contiguous run of named parameter records, in the
    order and record format of an owner checkpoint."""
    cfg = vault._cfg  # provider-side tool: architecture is known here
    sizes = [2 + len(name.encode()) + encoded_size(shape) for name, shape in param_shapes(cfg).items()]
    lengths = set()
    for i in range(len(sizes)):
        run = 0
        for j in range(i, len(sizes)):
            run += sizes[j]
            lengths.add(run)
    return lengths


def _fits(shape: tuple[int, ...], desc_shape: tuple[int, ...], budget_axes: int) -> bool:
    """``shape`` is ``desc_shape`` with an optional batch axis, where the first
    ``budget_axes`` descriptor axes are upper bounds rather than exact sizes."""
    if len(shape) == len(desc_shape) + 1:
        shape = shape[1:]
    if len(shape) != len(desc_shape):
        return False
    return all((0 < a <= b) if i < budget_axes else a == b for i, (a, b) in enumerate(zip(shape, desc_shape)))


def conforms(entry: LedgerEntry, vault: Vault) -> bool:
    """Does every tensor in the frame have the dims its schema field implies?"""
    cfg = vault._cfg
    descs = {str(d.id): d for d in make_descriptors(cfg)}
    feature = (cfg.embed_dim,)
    t = entry.type
    if t in (MsgType.FORWARD_REQ, MsgType.BACKWARD_RSP):
        for key, shape in zip(entry.keys, entry.shapes):
            d = descs.get(key)
            budget = 0 if d is None or d.modality == Modality.VISION_PIXELS else 1
            if d is None or not _fits(shape, d.shape, budget):
                return False
        return True
    if t in (MsgType.FORWARD_RSP, MsgType.BACKWARD_REQ):
        return all(_fits(s, feature, 0) for s in entry.shapes)
    if t == MsgType.EMBED_REQ:
        return all(_fits(s, (cfg.max_len,), 1) for s in entry.shapes)
    if t == MsgType.EMBED_RSP:
        return all(_fits(s, (cfg.max_len, cfg.width), 1) for s in entry.shapes)
    if t == MsgType.DESCRIBE_RSP:
        return all(key in descs and descs[key].shape == shape for key, shape in zip(entry.keys, entry.shapes))
    return not entry.shapes


@dataclass
class ExposureReport:
    bytes_by_type: dict[str, int] = field(default_factory=dict)
    frames_by_type: dict[str, int] = field(default_factory=dict)
    schema_weight_fields: dict = field(default_factory=dict)
    length_collisions: list[tuple[str, int]] = field(default_factory=list)
    unexplained_collisions: list[tuple[str, int]] = field(default_factory=list)
    nonconforming_frames: int = 0
    gradients_exposed: bool = False
    weights_exposed: bool = False
    layer_sizes_exposed: str = "none"
    exposed_layer_dims: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.frames_by_type

    def row(self, method: str) -> str:
        """One Table-1-style row: hidden information per column."""
        if self.empty:
            return ""
        yes_no = {True: "exposed", False: "hidden"}
        return (f"{method}: gradients={yes_no[self.gradients_exposed]} weights={yes_no[self.weights_exposed]} "
                f"layer-sizes={self.layer_sizes_exposed}")

    def to_text(self, method: str = "run") -> str:
        if self.empty:
            return ""
        lines = [self.row(method)]
        for name in sorted(self.bytes_by_type):
            lines.append(f"  {name}: frames={self.frames_by_type[name]} bytes={self.bytes_by_type[name]}")
        lines.append(f"  schema weight-bearing fields: {len(self.schema_weight_fields)}")
        lines.append(f"  parameter-length collisions: {len(self.length_collisions)} "
                     f"(unexplained by field dims: {len(self.unexplained_collisions)})")
        lines.append(f"  frames with nonconforming dims: {self.nonconforming_frames}")
        if self.exposed_layer_dims:
            lines.append("  layer dims seen: " + ", ".join("x".join(map(str, d)) for d in self.exposed_layer_dims))
        return "\n".join(lines) + "\n"


_PREFIX_TYPES = (MsgType.FORWARD_REQ, MsgType.BACKWARD_RSP, MsgType.DESCRIBE_RSP)


def audit_ledger(ledger: ExposureLedger, vault: Vault) -> ExposureReport:
    entries = ledger.entries()
    report = ExposureReport()
    if not entries:
        return report
    report.schema_weight_fields = schema_weight_fields()
    blocks = parameter_block_lengths(vault)
    bytes_by, frames_by = Counter(), Counter()
    prefix_ids = {d.id for d in make_descriptors(vault._cfg) if d.modality == Modality.LAYER_PREFIX}
    layer_dims = set()
    for e in entries:
        bytes_by[e.type.name] += e.nbytes
        frames_by[e.type.name] += 1
        payload = e.nbytes - HEADER
        ok = conforms(e, vault)
        report.nonconforming_frames += not ok
        if payload in blocks:
            # A length coincidence is harmless when every tensor in the frame has
            # exactly the dims of its activation/gradient field.
            report.length_collisions.append((e.type.name, payload))
            if not ok:
                report.unexplained_collisions.append((e.type.name, payload))
        if e.type == MsgType.BACKWARD_RSP and e.shapes:
            report.gradients_exposed = True
        if e.type in _PREFIX_TYPES:
            for key, shape in zip(e.keys, e.shapes):
                if key.isdigit() and int(key) in prefix_ids:
                    layer_dims.add(shape[-1:])
    report.bytes_by_type = dict(bytes_by)
    report.frames_by_type = dict(frames_by)
    report.weights_exposed = bool(report.schema_weight_fields or report.unexplained_collisions)
    report.exposed_layer_dims = sorted(layer_dims)
    report.layer_sizes_exposed = "partial" if layer_dims else "input-entry-only"
    return report
