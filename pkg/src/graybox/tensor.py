"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a contiguous numpy array
(float32 or float64).  A :class:`Tape` records every op whose inputs include a
tensor watched by that tape; :func:`backward` replays the record in reverse.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
DTYPE_FROM_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class TapeStateError(RuntimeError):
    pass


class DecodeError(ValueError):
    """Malformed tensor bytes; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class Tensor:
    """Immutable n-d value.  ``tape`` is set when the tensor is being differentiated."""

    __slots__ = ("data", "tape", "__weakref__")

    def __init__(self, data, dtype=None, tape: Tape | None = None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float32
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if dtype is None and arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {arr.dtype}")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None = None) -> Tensor:
        # no copy: only for arrays freshly produced by an op
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        return t

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tape is not None else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.dims[0]


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]
    name: str = ""


@dataclass(eq=False)
class Tape:
    """Execution record for one forward pass.  Single use: one backward."""

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    consumed: bool = False

    def watch(self, t: Tensor | np.ndarray) -> Tensor:
        if self.consumed:
            raise TapeStateError("tape already consumed by backward")
        if not isinstance(t, Tensor):
            t = Tensor(t)
        leaf = Tensor._wrap(t.data, self)
        self.leaves.append(leaf)
        return leaf

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp, name: str = "") -> None:
        if self.consumed:
            raise TapeStateError("tape already consumed by backward")
        self.nodes.append(Node(out, inputs, vjp, name))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    tape: Tape,
    seed: Tensor | np.ndarray | float | Mapping[Tensor, Tensor | np.ndarray],
    output: Tensor | None = None,
) -> dict[Tensor, Tensor]:
    """Gradients for every leaf of ``tape``.

    ``seed`` is the cotangent of the tape's final output (or of ``output``), or a
    mapping {output tensor: cotangent} when several outputs are seeded.
    """
    if tape.consumed:
        raise TapeStateError("backward already ran on this tape")
    if not tape.nodes and not tape.leaves:
        raise TapeStateError("empty tape")
    grads: dict[int, np.ndarray] = {}
    if isinstance(seed, Mapping):
        pairs = list(seed.items())
    else:
        if output is None:
            if not tape.nodes:
                raise TapeStateError("tape has no recorded ops; pass output explicitly")
            output = tape.nodes[-1].out
        pairs = [(output, seed)]
    for out, g in pairs:
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=out.dtype)
        if g.shape != out.dims:
            raise ShapeError(f"seed dims {g.shape} != output dims {out.dims}")
        if g.dtype != out.dtype:
            g = g.astype(out.dtype)
        key = id(out)
        grads[key] = grads[key] + g if key in grads else g
    tape.consumed = True

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(t.tape is tape for t in node.inputs)
        in_grads = node.vjp(g, needs)
        for inp, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi

    result = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.dims, dtype=leaf.dtype)
        result[leaf] = Tensor._wrap(np.array(g, dtype=leaf.dtype, copy=True))
    tape.nodes.clear()
    return result


# -- FLOP accounting ---------------------------------------------------------

_flops: ContextVar[list[int] | None] = ContextVar("graybox_flops", default=None)


def add_flops(n: int) -> None:
    box = _flops.get()
    if box is not None:
        box[0] += int(n)


@contextmanager
def count_flops():
    """Count multiply-add FLOPs (2 per MAC) of matmul and conv ops in the block."""
    box = [0]
    token = _flops.set(box)
    try:
        yield box
    finally:
        _flops.reset(token)


# -- binary encoding -----------------------------------------------------------
# u8 dtype tag (0=f32, 1=f64), u8 rank, rank x u32 LE dims, raw LE scalars


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in DTYPES:
        raise DTypeError(f"cannot encode dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ShapeError("rank > 255")
    head = struct.pack("<BB", DTYPES[arr.dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def encoded_size(dims: Sequence[int], dtype=np.float32) -> int:
    return 2 + 4 * len(dims) + int(np.prod(dims, dtype=np.int64)) * np.dtype(dtype).itemsize


def decode_tensor(buf: bytes | memoryview, offset: int = 0, max_bytes: int | None = None) -> tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns (tensor, offset after it)."""
    buf = memoryview(buf)
    n = len(buf)
    if offset + 2 > n:
        raise DecodeError("truncated tensor header", offset)
    tag, rank = buf[offset], buf[offset + 1]
    if tag not in DTYPE_FROM_TAG:
        raise DecodeError(f"unknown dtype tag {tag}", offset)
    pos = offset + 2
    if pos + 4 * rank > n:
        raise DecodeError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    if any(d == 0 for d in dims):
        raise DecodeError("zero extent in tensor dims", pos)
    pos += 4 * rank
    dtype = DTYPE_FROM_TAG[tag]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    limit = n if max_bytes is None else min(n, pos + max_bytes)
    if pos + nbytes > limit:
        raise DecodeError(f"tensor body needs {nbytes} bytes, {limit - pos} available", pos)
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    # fresh native-order, aligned buffer
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    return Tensor._wrap(arr), pos + nbytes
