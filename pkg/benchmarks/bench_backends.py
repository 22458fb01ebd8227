"""Benchmark the numba kernels against the pure-numpy fallback.

Times the 3x3x3 convolution forward/backward at pipeline-relevant sizes and
one full training step of the segmentation network, on both backends.

Run:  python benchmarks/bench_backends.py
"""

import time

import numpy as np

from oarseg import backend
from oarseg.nn3d import AdamState, UNet, UNetConfig, adam_step
from oarseg.nn3d.kernels import conv3d_backward, conv3d_forward

SHAPES = [
    # (ci, co, spatial): locator level 0, segnet level 0, paper locator level 0
    (8, 8, (16, 16, 16)),
    (8, 8, (32, 32, 32)),
    (16, 16, (16, 16, 16)),
    (8, 8, (96, 96, 56)),
]


def timeit(fn, reps=5):
    fn()  # warm (and JIT-compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_conv(use_numba: bool):
    backend.NUMBA_ENABLED = use_numba
    rng = np.random.default_rng(0)
    rows = []
    for ci, co, sp in SHAPES:
        x = rng.standard_normal((1, ci) + sp, dtype=np.float32)
        k = rng.standard_normal((co, ci, 3, 3, 3), dtype=np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        gy = rng.standard_normal((1, co) + sp, dtype=np.float32)
        t_fwd = timeit(lambda: conv3d_forward(x, k, b))
        t_bwd = timeit(lambda: conv3d_backward(x, k, gy))
        macs = int(np.prod(sp)) * 27 * ci * co
        rows.append((ci, co, sp, t_fwd, t_bwd, macs))
    return rows


def bench_train_step(use_numba: bool, spatial=(32, 32, 32), base=8):
    backend.NUMBA_ENABLED = use_numba
    rng = np.random.default_rng(0)
    net = UNet.initialized(UNetConfig(base_channels=base), seed=0)
    state = AdamState.for_params(net.params, net.trainable_names())
    x = rng.standard_normal((1, 1) + spatial, dtype=np.float32)
    y = (rng.random((1, 1) + spatial) < 0.05).astype(np.float32)

    def step():
        loss, grads = net.loss_and_grads(x, y)
        adam_step(net.params, grads, state)

    return timeit(step, reps=3)


def main():
    if not backend.NUMBA_ENABLED:
        print("numba backend unavailable or disabled; benchmarking numpy only")
        flags = [False]
    else:
        flags = [True, False]
    results = {f: bench_conv(f) for f in flags}
    print(f"{'conv (ci->co @ spatial)':<34}" + "".join(
        f"{'numba' if f else 'numpy':>22}" for f in flags))
    for i, (ci, co, sp, *_ ) in enumerate(results[flags[0]]):
        label = f"{ci:>3} -> {co:<3} @ {str(sp):<14}"
        cells = []
        for f in flags:
            _, _, _, t_fwd, t_bwd, macs = results[f][i]
            cells.append(f"{t_fwd * 1e3:7.1f} / {t_bwd * 1e3:7.1f} ms")
        print(f"{label:<34}" + "".join(f"{c:>22}" for c in cells))
    print("(forward / backward per call)")

    print()
    steps = {f: bench_train_step(f) for f in flags}
    for f in flags:
        print(f"full training step ({'numba' if f else 'numpy'}): {steps[f] * 1e3:8.1f} ms")
    if len(flags) == 2:
        print(f"speedup: {steps[False] / steps[True]:.2f}x")
    backend.NUMBA_ENABLED = flags[0]


if __name__ == "__main__":
    main()
