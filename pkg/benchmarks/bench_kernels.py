"""Time the numba kernels against their numpy counterparts.

Shapes follow the default CondenseNeXt at batch 64: depthwise 3x3 on the
32-channel 32x32 bottleneck, and the fused batch-norm + ReLU6 on a
128-channel 32x32 feature map.

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from condensenext.kernels import NUMBA_KERNELS, NUMPY_KERNELS


def _best(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch, rng):
    xpad = rng.normal(size=(batch, 32, 34, 34)).astype(np.float32)
    w = rng.normal(size=(32, 3, 3)).astype(np.float32)
    gout = rng.normal(size=(batch, 32, 32, 32)).astype(np.float32)
    x = rng.normal(size=(batch, 128, 32, 32)).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, 128).astype(np.float32)
    beta = rng.normal(size=128).astype(np.float32)
    _, xhat, _, _, inv_std = NUMPY_KERNELS.bn_act_forward(x, gamma, beta, 1e-5, 2)
    gbn = rng.normal(size=x.shape).astype(np.float32)
    return {
        "dw_forward": lambda k: k.dw_forward(xpad, w, 1, 32, 32),
        "dw_backward_input": lambda k: k.dw_backward_input(gout, w, 1, 34, 34),
        "dw_backward_weight": lambda k: k.dw_backward_weight(xpad, gout, 1, 3),
        "bn_act_forward": lambda k: k.bn_act_forward(x, gamma, beta, 1e-5, 2),
        "bn_act_backward": lambda k: k.bn_act_backward(gbn, xhat, gamma, beta, inv_std, 2),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, call in cases(args.batch, rng).items():
        t_np = _best(lambda: call(NUMPY_KERNELS), args.repeat)
        t_nb = _best(lambda: call(NUMBA_KERNELS), args.repeat)
        print(f"{name:<20} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
