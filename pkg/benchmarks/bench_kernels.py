"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also runs one forward/backward step of a width-divisor-8 RMCN-2 under each
backend. Both backends must give identical results; the script checks that.
"""
import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np


def kernel_timings(repeat):
    from mcnraw import _pykernels

    try:
        from mcnraw import _ckernels
    except ImportError:
        _ckernels = None
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 16, 64, 64)).astype(np.float32)
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    g = rng.standard_normal((1, 16, 32, 32)).astype(np.float32)
    _, idx = _pykernels.maxpool2_forward(x)
    cases = {
        "im2col": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool2_forward": lambda m: m.maxpool2_forward(x),
        "maxpool2_backward": lambda m: m.maxpool2_backward(g, idx),
    }
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=10, repeat=repeat)) / 10 * 1e3
        if _ckernels is None:
            print(f"{name:<20}{t_py:>10.3f}{'n/a':>11}")
            continue
        a, b = fn(_pykernels), fn(_ckernels)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=10, repeat=repeat)) / 10 * 1e3
        print(f"{name:<20}{t_py:>10.3f}{t_c:>11.3f}{t_py / t_c:>8.1f}x" + ("" if same else "  MISMATCH"))


STEP = """
import time, numpy as np
from mcnraw import BACKEND, McnConfig, McnModel, Tensor, backward, multi_granulation_loss
m = McnModel(McnConfig(n_sgn=2, width_divisor=8), seed=0)
x = Tensor(np.random.default_rng(1).random((1, 4, 32, 32), dtype=np.float32))
t = Tensor(np.random.default_rng(2).random((1, 3, 64, 64), dtype=np.float32))
best = 1e9
for _ in range({repeat}):
    t0 = time.perf_counter()
    loss = multi_granulation_loss(m(x), t)
    m.zero_grad(); backward(loss)
    best = min(best, time.perf_counter() - t0)
print(BACKEND, best * 1e3, float(loss.data))
"""


def step_timings(repeat):
    results = {}
    for pure in ("0", "1"):
        env = dict(os.environ, MCNRAW_PURE=pure)
        out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        results[out[0]] = (float(out[1]), out[2])
    print("\nRMCN-2 (width/8, 32x32 packed) forward+backward:")
    for name, (ms, loss) in results.items():
        print(f"  {name:<8}{ms:8.2f} ms   loss {loss}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    importlib.import_module("mcnraw")
    kernel_timings(args.repeat)
    step_timings(args.repeat)


if __name__ == "__main__":
    main()
