"""Pure numpy fallbacks for the compiled kernels (same results, bit for bit)."""
import numpy as np

BACKEND = "python"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, h=FNV_OFFSET):
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def im2col(x, k):
    B, C, H, W = x.shape
    p = k // 2
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + H, p : p + W] = x
    cols = np.empty((B, H, W, C, k, k), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, :, ky, kx] = xp[:, :, ky : ky + H, kx : kx + W].transpose(0, 2, 3, 1)
    return cols.reshape(B * H * W, C * k * k)


def col2im(cols, shape, k):
    B, C, H, W = shape
    p = k // 2
    c6 = cols.reshape(B, H, W, C, k, k)
    out = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + H, kx : kx + W] += c6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[:, :, p : p + H, p : p + W])
