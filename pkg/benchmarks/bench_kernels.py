"""Compare the compiled and numpy kernel backends.

Times im2col, col2im and max-pool forward/backward on the tensor sizes the
toy nets actually see, plus one full conv layer forward+backward, and
checks both backends agree bit-for-bit on every input.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from deepid3 import _pykernels
from deepid3.kernels import compiled_backend

# (channels, height, width, kernel, stride, pad) as seen in the default nets
SHAPES = [
    (1, 32, 32, 3, 1, 1),
    (8, 16, 16, 3, 1, 1),
    (24, 8, 8, 3, 1, 1),
    (32, 4, 4, 2, 2, 0),
]


def _cases(c, h, w, k, s, p, rng):
    x = rng.standard_normal((c, h, w))
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    cols = rng.standard_normal((c * k * k, oh * ow))
    ph, pw = (h + 2 * p - 2) // 2 + 1, (w + 2 * p - 2) // 2 + 1
    g = rng.standard_normal((c, ph, pw))
    return {
        "im2col": lambda b: b.im2col(x, k, k, s, p),
        "col2im": lambda b: b.col2im(cols, c, h, w, k, k, s, p),
        "maxpool_fwd": lambda b: b.maxpool_forward(x, 2, 2, p),
        "maxpool_bwd": lambda b: b.maxpool_backward(g, b.maxpool_forward(x, 2, 2, p)[1], h, w),
        "conv_fwd_bwd": lambda b: _conv_step(b, x, k, s, p, rng_w=np.random.default_rng(1)),
    }


def _conv_step(b, x, k, s, p, rng_w):
    c, h, w = x.shape
    co = 8
    wt = rng_w.standard_normal((co, c * k * k))
    cols = b.im2col(x, k, k, s, p)
    out = wt @ cols
    return b.col2im(wt.T @ np.ones_like(out), c, h, w, k, k, s, p)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per timing (default 200)")
    args = ap.parse_args(argv)
    if compiled_backend is None:
        print("compiled backend not available (extension not built or DEEPID3_PURE_PYTHON set)")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'shape':<20}{'kernel':<14}{'python us':>11}{'cython us':>11}{'speedup':>9}  equal")
    for shape in SHAPES:
        for name, fn in _cases(*shape, rng).items():
            same = _same(fn(_pykernels), fn(compiled_backend))
            t_py = min(timeit.repeat(lambda: fn(_pykernels), number=args.repeat, repeat=3)) / args.repeat
            t_c = min(timeit.repeat(lambda: fn(compiled_backend), number=args.repeat, repeat=3)) / args.repeat
            label = "x".join(map(str, shape[:3])) + f" k{shape[3]}s{shape[4]}"
            print(f"{label:<20}{name:<14}{t_py * 1e6:>11.1f}{t_c * 1e6:>11.1f}{t_py / t_c:>8.2f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
