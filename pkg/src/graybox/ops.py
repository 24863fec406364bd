"""Differentiable primitives.

Broadcasting is limited to the bias pattern: the second operand of ``add``/``mul``
may have the trailing dims of the first.  Everything else must match exactly.
FLOPs (2 per multiply-add) are counted for ``matmul`` and ``conv2d_same`` only.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from graybox import kernels
from graybox.tensor import DTypeError, ShapeError, Tape, TapeStateError, Tensor, add_flops

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class ConfigError(ValueError):
    pass


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp, name: str) -> Tensor:
    tape: Tape | None = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeStateError(f"{name}: inputs belong to different tapes")
    out = Tensor._wrap(arr, tape)
    if tape is not None:
        tape.record(out, inputs, vjp, name)
    return out


def _same_dtype(name: str, *ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeError(f"{name}: dtype mismatch {dt} vs {t.dtype}")


def _check_bias(name: str, a: Tensor, b: Tensor) -> None:
    if a.dims == b.dims:
        return
    if b.ndim <= a.ndim and a.dims[a.ndim - b.ndim :] == b.dims:
        return
    raise ShapeError(f"{name}: dims {a.dims} and {b.dims} are incompatible (only trailing-dim bias broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    _check_bias("add", a, b)
    sb = b.dims

    def vjp(g, needs):
        return g, (_unbroadcast(g, sb) if needs[1] else None)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    _check_bias("sub", a, b)
    sb = b.dims

    def vjp(g, needs):
        return g, (-_unbroadcast(g, sb) if needs[1] else None)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    _check_bias("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        ga = g * bd if needs[0] else None
        gb = _unbroadcast(g * ad, bd.shape) if needs[1] else None
        return ga, gb

    return _result(ad * bd, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def vjp(g, needs):
        return (g * c,)

    return _result(a.data * c, (a,), vjp, "scale")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    inner = c * (xd + xd.dtype.type(0.044715) * (xd * xd * xd))
    th = np.tanh(inner)
    out = xd.dtype.type(0.5) * xd * (1 + th)

    def vjp(g, needs):
        dinner = c * (1 + xd.dtype.type(3 * 0.044715) * (xd * xd))
        d = xd.dtype.type(0.5) * (1 + th) + xd.dtype.type(0.5) * xd * (1 - th * th) * dinner
        return (g * d,)

    return _result(out, (x,), vjp, "gelu")


# -- shape ops -----------------------------------------------------------------


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (default: swap the last two).  Result is stored contiguously."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose needs rank >= 2")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), vjp, "transpose")


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if -1 in dims:
        known = int(np.prod([d for d in dims if d != -1]))
        dims = tuple(x.data.size // known if d == -1 else d for d in dims)
    if int(np.prod(dims)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.dims} to {dims}")
    src = x.dims

    def vjp(g, needs):
        return (g.reshape(src),)

    return _result(x.data.reshape(dims), (x,), vjp, "reshape")


def concat_rows(xs: Sequence[Tensor], axis: int = -2) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat of nothing")
    _same_dtype("concat_rows", *xs)
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.dims[i] != xs[0].dims[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat_rows: {xs[0].dims} vs {t.dims} along axis {axis}")
    bounds = np.cumsum([0] + [t.dims[ax] for t in xs])

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * nd
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return out

    return _result(np.concatenate([t.data for t in xs], axis=ax), xs, vjp, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    ax = axis % x.ndim
    n = x.dims[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {n}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    src, dt = x.dims, x.dtype

    def vjp(g, needs):
        full = np.zeros(src, dtype=dt)
        full[sl] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), vjp, "slice_rows")


def expand(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies along a new leading axis (gradient sums them)."""

    def vjp(g, needs):
        return (g.sum(axis=0),)

    return _result(np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.dims)), (x,), vjp, "expand")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise DTypeError("ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.dims[0]):
        raise ShapeError(f"id out of range for table of {table.dims[0]} rows")
    shape, dt = table.dims, table.dtype

    def vjp(g, needs):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), vjp, "embedding_lookup")


# -- reductions ----------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001
    src, dt = x.dims, x.dtype

    def vjp(g, needs):
        return (np.full(src, g, dtype=dt),)

    return _result(np.asarray(x.data.sum(), dtype=dt), (x,), vjp, "sum")


def mean(x: Tensor) -> Tensor:
    src, dt = x.dims, x.dtype
    n = x.data.size

    def vjp(g, needs):
        return (np.full(src, g / n, dtype=dt),)

    return _result(np.asarray(x.data.mean(), dtype=dt), (x,), vjp, "mean")


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` (same leading dims)."""
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.dims} and {b.dims}")
    if a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul inner dims differ: a{a.dims} has k={a.dims[-1]}, b{b.dims} has k={b.dims[-2]}")
    if b.ndim > 2 and a.dims[:-2] != b.dims[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.dims[:-2]} vs {b.dims[:-2]}")
    ad, bd = a.data, b.data
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    add_flops(2 * int(np.prod(ad.shape[:-2], dtype=np.int64)) * m * k * n)
    shared_b = bd.ndim == 2

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = g @ (bd.T if shared_b else np.swapaxes(bd, -1, -2))
        if needs[1]:
            if shared_b:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), vjp, "matmul")


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero padding (k-1)/2; accepts [C,H,W] or [B,C,H,W]."""
    _same_dtype("conv2d_same", x, kernel, bias)
    if kernel.ndim != 4 or kernel.dims[2] != kernel.dims[3]:
        raise ShapeError(f"kernel must be [C_out, C_in, k, k], got {kernel.dims}")
    cout, cin, k, _ = kernel.dims
    if k % 2 == 0:
        raise ConfigError(f"conv2d_same needs an odd kernel size, got {k}")
    if bias.dims != (cout,):
        raise ShapeError(f"bias dims {bias.dims} != ({cout},)")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d_same input must be [C,H,W] or [B,C,H,W], got {x.dims}")
    xd = x.data[None] if single else x.data
    B, C, H, W = xd.shape
    if C != cin:
        raise ShapeError(f"conv2d_same: input has {C} channels, kernel expects {cin}")
    add_flops(2 * B * cout * cin * k * k * H * W)
    cols = kernels.im2col(xd, k)  # [B*H*W, cin*k*k]
    wmat = kernel.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T + bias.data).reshape(B, H, W, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def vjp(g, needs):
        g4 = g[None] if single else g
        gflat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gk = gb = None
        if needs[0]:
            gx = kernels.col2im(np.ascontiguousarray(gflat @ wmat), (B, C, H, W), k)
            if single:
                gx = gx[0]
        if needs[1]:
            gk = (gflat.T @ cols).reshape(cout, cin, k, k)
        if needs[2]:
            gb = gflat.sum(axis=0)
        return gx, gk, gb

    return _result(out, (x, kernel, bias), vjp, "conv2d_same")


# -- normalisation ---------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), vjp, "softmax_rows")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    _same_dtype("layernorm", x, gain, bias)
    d = x.dims[-1]
    if gain.dims != (d,) or bias.dims != (d,):
        raise ShapeError(f"layernorm affine dims must be ({d},), got {gain.dims}, {bias.dims}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g, needs):
        gx = gg = gbias = None
        if needs[0]:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbias

    return _result(out, (x, gain, bias), vjp, "layernorm")


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalise the last axis.  The norm is accumulated in float64."""
    xd = x.data
    norm = np.sqrt((xd.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize of a zero vector")
    y = (xd / norm).astype(xd.dtype)
    inv = (1.0 / norm).astype(xd.dtype)

    def vjp(g, needs):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), vjp, "l2_normalize")


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits needs [N, C] logits, got {logits.dims}")
    t = np.asarray(targets)
    n = logits.dims[0]
    if t.shape != (n,):
        raise ShapeError(f"targets dims {t.shape} != ({n},)")
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), t].mean()
    dt = ld.dtype

    def vjp(g, needs):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1
        return ((p * (g / n)).astype(dt),)

    return _result(np.asarray(loss, dtype=dt), (logits,), vjp, "cross_entropy_logits")
