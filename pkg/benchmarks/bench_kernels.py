"""Compare the compiled kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 32]

Each kernel is first checked for bit-identical output on both backends, then
timed with ``timeit`` (best of ``--repeat``).  Exits non-zero if the outputs
differ or the extension is not built.
"""
import argparse
import sys
import timeit

import numpy as np

from graybox import _pykernels


def _cases(batch, rng):
    x = rng.normal(size=(batch, 16, 32, 32)).astype(np.float32)
    cols = _pykernels.im2col(x, 3)
    blob = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    return {
        "im2col 3x3": (lambda m: m.im2col(x, 3)),
        "col2im 3x3": (lambda m: m.col2im(cols, x.shape, 3)),
        "fnv1a64 1MiB": (lambda m: m.fnv1a64(blob)),
    }


def _same(a, b):
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    try:
        from graybox import _ckernels
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 2

    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'python ms':>11}{'cython ms':>11}{'speedup':>9}  identical")
    status = 0
    for name, fn in _cases(args.batch, rng).items():
        same = _same(fn(_pykernels), fn(_ckernels))
        status |= not same
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<14}{t_py:11.2f}{t_c:11.2f}{t_py / t_c:9.1f}  {same}")
    return status


if __name__ == "__main__":
    sys.exit(main())
