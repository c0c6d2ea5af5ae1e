"""Time the numba and numpy kernel sets on training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each row reports the median wall time per call for both backends and the
speed-up.  Outputs of the two backends are compared before timing.
"""

import argparse
import time

import numpy as np

from acdl import _kernels
from acdl import tensor as T
from acdl.models import build_cnn


def _median_time(fn, repeat):
    fn()  # warm-up (and numba compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def kernel_cases(rng):
    x = rng.random((32, 64, 64, 3), dtype=np.float32)
    feat = rng.random((32, 62, 62, 32), dtype=np.float32)
    cols = rng.random((32, 60, 60, 3, 3, 32), dtype=np.float32)
    img = rng.random((480, 640, 3))
    pooled, idx = _kernels.NUMPY.maxpool_fwd(feat)
    g = rng.random(pooled.shape, dtype=np.float32)
    return {
        "im2col 32x64x64x3 k3": lambda k: k.im2col(x, 3, 3, 1, 62, 62),
        "im2col 32x31x31x32 k3": lambda k: k.im2col(feat[:, :31, :31], 3, 3, 1, 29, 29),
        "col2im 32x62x62x32 k3": lambda k: k.col2im(cols, 62, 62, 1),
        "maxpool fwd 32x62x62x32": lambda k: k.maxpool_fwd(feat),
        "maxpool bwd 32x62x62x32": lambda k: k.maxpool_bwd(g, idx, 62, 62),
        "resize 480x640 -> 224x224": lambda k: k.resize(img, 224, 224),
    }


def train_step(model, x, y):
    out = model(x, training=True)
    loss = T.bce(out, y)
    model.zero_grad()
    loss.backward()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _kernels.NUMBA is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(rng).items():
        a, b = fn(_kernels.NUMPY), fn(_kernels.NUMBA)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-6, atol=1e-6)
        rows.append((name, _median_time(lambda: fn(_kernels.NUMPY), args.repeat),
                     _median_time(lambda: fn(_kernels.NUMBA), args.repeat)))

    # whole CNN step, where BLAS dominates and the kernels are a fraction
    model = build_cnn((64, 64, 3), seed=0)
    x = rng.random((32, 64, 64, 3), dtype=np.float32)
    y = rng.integers(0, 2, 32)
    step = {}
    for backend in ("numpy", "numba"):
        prev = _kernels.use(backend)
        step[backend] = _median_time(lambda: train_step(model, x, y), max(3, args.repeat // 4))
        _kernels.use(prev)
    rows.append(("CNN 64x64 train step b=32", step["numpy"], step["numba"]))

    print(f"{'case':<30}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}")
    for name, t_np, t_nb in rows:
        print(f"{name:<30}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
