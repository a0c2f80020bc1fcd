"""Time the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Kernel timings use shapes from a batch-8, 64x32 training step. With
``--end-to-end`` one student forward+backward step is also timed under each
backend, in a subprocess so the ``CYCLEDEPTH_NUMBA`` flag takes effect.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cycledepth import _kernels as K


def _time(fn, repeat):
    fn()  # warm-up (and numba compilation)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def kernel_cases(rng):
    n, c, h, w = 8, 16, 32, 64
    xp = np.pad(rng.standard_normal((n, c, h, w)).astype(np.float32), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = rng.standard_normal((n, c * 9, h * w)).astype(np.float32)
    src = rng.random((n, 3, h, w)).astype(np.float32)
    disp = (rng.random((n, 1, h, w)) * 9.6).astype(np.float32)
    g = rng.standard_normal((n, 3, h, w)).astype(np.float32)
    img = rng.random((n, 3, h, w)).astype(np.float32)
    gp = rng.standard_normal((n, 3, h - 2, w - 2)).astype(np.float32)

    def warp_bwd(kern):
        _, x0, x1, frac, inside = kern["warp_forward"](src, disp, -1)
        return lambda: kern["warp_backward"](g, src, x0, x1, frac, inside, -1)

    return {
        "im2col 3x3": lambda kern: (lambda: kern["im2col"](xp, 3, 1, h, w)),
        "col2im 3x3": lambda kern: (lambda: kern["col2im"](cols, xp.shape, 3, 1, h, w)),
        "warp forward": lambda kern: (lambda: kern["warp_forward"](src, disp, -1)),
        "warp backward": warp_bwd,
        "pool3 forward": lambda kern: (lambda: kern["pool3_forward"](img)),
        "pool3 backward": lambda kern: (lambda: kern["pool3_backward"](gp, img.shape)),
    }


_STEP = """
import time, numpy as np
from cycledepth import autodiff as ad, backend
from cycledepth.autodiff import Tensor
from cycledepth.networks import NetworkBundle, NetworkConfig
from cycledepth.warp import warp, SYNTHESIZE_LEFT
from cycledepth.losses import appearance_loss
rng = np.random.default_rng(0)
b = NetworkBundle(NetworkConfig(), 32, 64)
L = rng.random((8, 3, 32, 64)).astype(np.float32); R = rng.random((8, 3, 32, 64)).astype(np.float32)
def step():
    d = b.student_forward(Tensor(R)).disparities[0]
    ad.backward(appearance_loss(warp(d, Tensor(R), SYNTHESIZE_LEFT), Tensor(L), 0.85))
    for p in b.parameters(): p.grad = None
step()
best = min((lambda t0: (step(), time.perf_counter() - t0)[1])(time.perf_counter()) for _ in range({repeat}))
print(backend(), best * 1e3)
"""


def end_to_end(repeat):
    rows = []
    for flag in ("1", "0"):
        env = dict(os.environ, CYCLEDEPTH_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _STEP.replace("{repeat}", str(repeat))], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        rows.append((out[0], float(out[1])))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()

    if not K.HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, make in kernel_cases(rng).items():
        t_np = _time(make(K.NUMPY_KERNELS), args.repeat)
        t_nb = _time(make(K.NUMBA_KERNELS), args.repeat)
        print(f"{name:<16} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.2f}x")
    if args.end_to_end:
        print("\nstudent forward+backward, batch 8, 64x32 (best of repeats)")
        for name, ms in end_to_end(max(3, args.repeat // 4)):
            print(f"  {name:<8} {ms:8.1f} ms")


if __name__ == "__main__":
    main()
