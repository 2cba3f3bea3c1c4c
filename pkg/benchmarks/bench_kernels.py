"""Compare the compiled and numpy kernel backends.

Times each kernel on toy-network shapes plus one full forward/backward pass of
the 2-cell benchmark network, per available backend::

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from drnet.backbone import Network
from drnet.config import toy_config
from drnet.router import TrainRouting
from drnet.tensor import Tape
from drnet.tensor import kernels
from drnet.training import compute_loss


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((32, 16, 32, 32)).astype(np.float32)
    w3 = rng.standard_normal((16, 1, 3, 3)).astype(np.float32)
    w5 = rng.standard_normal((16, 1, 5, 5)).astype(np.float32)
    g = rng.standard_normal((32, 16, 32, 32)).astype(np.float32)
    _, arg = kernels.maxpool_forward(x, 3, 1, 1)
    cols = kernels.im2col(x, 3, 1, 1)
    return {
        "dwconv3x3 fwd": lambda: kernels.dwconv_forward(x, w3, 1, 1),
        "dwconv5x5 fwd": lambda: kernels.dwconv_forward(x, w5, 1, 2),
        "dwconv3x3 bwd": lambda: kernels.dwconv_backward(x, w3, g, 1, 1),
        "im2col 3x3": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 1, 1),
        "maxpool fwd": lambda: kernels.maxpool_forward(x, 3, 1, 1),
        "maxpool bwd": lambda: kernels.maxpool_backward(g, arg, x.shape, 3, 1, 1),
        "avgpool fwd": lambda: kernels.avgpool_forward(x, 3, 1, 1),
    }


def train_step(net, x, y, rng):
    def step():
        pol = TrainRouting("gumbel", 1.0, rng)
        with Tape() as tape:
            logits, aux = net.forward(x, pol, training=True)
            total, _ = compute_loss(logits, aux, y, pol.recalibrated, None, 0.0)
        tape.backward(total)
    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        cases = kernel_cases(rng)
        net = Network(toy_config(), seed=0)
        x = rng.standard_normal((32, 3, 32, 32)).astype(np.float32)
        y = rng.integers(0, 10, 32)
        cases["toy net train step (32 images)"] = train_step(net, x, y, rng)
        for case, fn in cases.items():
            fn()  # warm-up
            results.setdefault(case, {})[name] = best_of(fn, args.repeats)
    header = f"{'case':34s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for case, row in results.items():
        line = f"{case:34s}" + "".join(f"{row[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['cython']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
