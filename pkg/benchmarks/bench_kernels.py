"""Compare the compiled and pure-numpy patch kernels behind conv3d.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 4] [--extent 16]

Prints one line per (kernel, shape) with the median wall time of each
backend and the speed-up. The conv3d rows time a full forward plus backward
pass with each backend swapped in.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from tadm3d.tensor_core import Tensor, backward, ops
from tadm3d.tensor_core import _fallback
from tadm3d.tensor_core import kernels as active

try:
    from tadm3d.tensor_core import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def _median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _conv_step(x, w, b, stride):
    xt = Tensor(x, requires_grad=True)
    wt = Tensor(w, requires_grad=True)
    bt = Tensor(b, requires_grad=True)
    out = ops.conv3d(xt, wt, bt, stride=stride, padding=1)
    backward(ops.reduce_sum(ops.mul(out, out)))


def _with_backend(module, fn):
    saved = active.im2col3d, active.col2im3d
    active.im2col3d, active.col2im3d = module.im2col3d, module.col2im3d
    try:
        return fn()
    finally:
        active.im2col3d, active.col2im3d = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--extent", type=int, default=16)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    e = args.extent
    print(f"{'case':<34s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    for cin, cout, stride in ((8, 8, 1), (16, 8, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1)):
        size = e if stride == 1 or cin <= 16 else e // 2
        x = rng.standard_normal((args.batch, cin, size, size, size)).astype(np.float32)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        out = (size + 2 - 3) // stride + 1
        shape = (out, out, out)
        patches = _fallback.im2col3d(xp, 3, stride, shape)
        for name, fn in (
            ("im2col", lambda m: m.im2col3d(xp, 3, stride, shape)),
            ("col2im", lambda m: m.col2im3d(patches, xp.shape, 3, stride, shape)),
        ):
            tp = _median_time(lambda: fn(_fallback), args.repeat)
            tc = _median_time(lambda: fn(compiled), args.repeat)
            print(f"{name} c={cin:<3d} {size}^3 s={stride:<13d} {tp * 1e3:10.2f} {tc * 1e3:10.2f} {tp / tc:8.2f}x")
        w = rng.standard_normal((cout, cin, 3, 3, 3)).astype(np.float32) * 0.1
        b = np.zeros(cout, dtype=np.float32)
        step = lambda: _conv_step(x, w, b, stride)  # noqa: E731
        tp = _with_backend(_fallback, lambda: _median_time(step, args.repeat))
        tc = _with_backend(compiled, lambda: _median_time(step, args.repeat))
        label = f"conv3d fwd+bwd {cin}->{cout} {size}^3 s={stride}"
        print(f"{label:<34s} {tp * 1e3:10.2f} {tc * 1e3:10.2f} {tp / tc:8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
