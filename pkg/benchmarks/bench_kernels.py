"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 10] [--step]

``--step`` also times one FLAME-tiny training step at 120 px under each
backend (each in its own interpreter, since the backend is chosen at import).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from flamegaze import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from flamegaze.model import GazeNet, ModelSpec
from flamegaze.geometry import vector_loss_grad_angles
from flamegaze._kernels import backend
rng = np.random.default_rng(0)
m = GazeNet(ModelSpec.from_preset("tiny", variant="FLAME", input_resolution=120))
x = (rng.random((8,120,120,3)), rng.random((8,120,120,28))*0.16, rng.normal(size=(8,2))*0.1, rng.random((8,28,2))*120)
y = rng.normal(size=(8,2))*0.2
def step():
    m.zero_grad(); out = m.forward(*x, train=True); _, g = vector_loss_grad_angles(out, y); m.backward(g)
step()
t = time.perf_counter()
for _ in range({n}): step()
print(backend(), (time.perf_counter() - t) / {n})
"""


def timeit(fn, repeat):
    fn()  # warm-up, includes numba compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases():
    rng = np.random.default_rng(0)
    xp = rng.random((8, 122, 122, 28), dtype=np.float32)
    cols = K.im2col_numpy(xp, 3, 3, 1)
    x = rng.random((8, 60, 60, 16), dtype=np.float32)
    _, idx = K.maxpool2_forward_numpy(x)
    d = rng.random((8, 30, 30, 16), dtype=np.float32)
    x2 = rng.random((8 * 60 * 60, 16), dtype=np.float32)
    g, b = np.ones(16, np.float32), np.zeros(16, np.float32)
    _, xhat, _, _, inv = K.batchnorm_train_numpy(x2, g, b, 1e-5)
    pts = rng.random((28, 2)) * 120
    img = rng.random((120, 120, 28))
    return [
        ("im2col 8x122x122x28", (xp, 3, 3, 1), "im2col"),
        ("col2im 8x122x122x28", (cols, xp.shape, 3, 3, 1), "col2im"),
        ("maxpool2 fwd 8x60x60x16", (x,), "maxpool2_forward"),
        ("maxpool2 bwd 8x60x60x16", (d, idx, x.shape), "maxpool2_backward"),
        ("batchnorm fwd 28800x16", (x2, g, b, 1e-5), "batchnorm_train"),
        ("batchnorm bwd 28800x16", (x2, xhat, g, inv), "batchnorm_backward"),
        ("heatmap 120x120x28", (pts, 120, 120, 1.0), "gaussian_heatmap"),
        ("bilinear 120->30 x28", (img, 30, 30), "bilinear_resize"),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--step", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, inputs, name in cases():
        t_np = timeit(lambda: getattr(K, name + "_numpy")(*inputs), args.repeat)
        t_nb = timeit(lambda: getattr(K, name + "_numba")(*inputs), args.repeat)
        print(f"{label:28s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")
    if args.step:
        for flag in ("0", "1"):
            env = dict(os.environ, FLAME_NUMBA=flag)
            res = subprocess.run(
                [sys.executable, "-c", STEP_SNIPPET.format(n=3)], env=env, capture_output=True, text=True, check=True
            )
            name, sec = res.stdout.split()
            print(f"train step FLAME-tiny 120px batch 8 [{name}]: {float(sec) * 1e3:.0f} ms")


if __name__ == "__main__":
    main()
