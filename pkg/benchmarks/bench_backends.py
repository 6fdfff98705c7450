"""Time the numba and pure-numpy kernels on the same inputs.

    python benchmarks/bench_backends.py [--repeat 5] [--size 96]

Reports per-op median wall time for both backends and their max abs
difference. The numba kernels are compiled (or loaded from cache) in a
warm-up call that is not timed.
"""

import argparse
import time

import numpy as np

from motionenergy import _backend, network
from motionenergy.tensor_core import conv_bank, conv_bank_grad, maxpool, resize_bilinear


def _median_time(fn, repeat):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def _flatten(result):
    if isinstance(result, dict):
        result = list(result.values())
    elif not isinstance(result, tuple):
        result = [result]
    return np.concatenate([np.ravel(v) for v in result if isinstance(v, np.ndarray)])


def cases(size, rng):
    x = rng.standard_normal((4, size, size, 3))
    w = rng.standard_normal((11, 11, 3, 24))
    h = rng.standard_normal((4, size // 2, size // 2, 24))
    w2 = rng.standard_normal((11, 11, 24, 24))
    g = rng.standard_normal((4, size, size, 24))
    cfg = network.NetworkConfig(frames=3, size=9, kernels=2, orientations=12, speeds=4, num_scales=3)
    net = network.MotionNet.random(cfg, seed=0)
    frames = rng.random((2, size, size, 3))
    return {
        "conv1 forward": lambda: conv_bank(x, w),
        "conv2 forward": lambda: conv_bank(h, w2),
        "conv1 backward": lambda: conv_bank_grad(x, w, g),
        "maxpool": lambda: maxpool(g, 3),
        "resize": lambda: resize_bilinear(g, size // 2 + 7, size // 2 + 3),
        "network fwd+bwd": lambda: network.backward(
            network.forward_recurrent(frames, net)[1], net, d_flows=[np.ones((2, size // 2, size // 2, 2))]
        ),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=96)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    ops = cases(args.size, rng)
    print(f"{'op':18s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in ops.items():
        res, t = {}, {}
        for backend in ("numba", "numpy"):
            _backend.set_backend(backend)
            t[backend] = _median_time(fn, args.repeat)
            res[backend] = fn()
        _backend.set_backend("numba")
        a, b = res["numba"], res["numpy"]
        diff = float(np.max(np.abs(_flatten(a) - _flatten(b))))
        print(f"{name:18s} {1e3 * t['numba']:11.2f} {1e3 * t['numpy']:11.2f} {t['numpy'] / t['numba']:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
