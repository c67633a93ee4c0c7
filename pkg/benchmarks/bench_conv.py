"""Compare the compiled and pure-NumPy convolution backends.

Times forward + both backward kernels at training-like shapes and prints a
table.  The compiled path wins at small channel counts (the training
configs used by the tests); the BLAS-backed pure path catches up as
channels grow.  Run:  python benchmarks/bench_conv.py
"""

import time

import numpy as np

from stacksv import _conv_numpy, kernels


def time_backend(impl, x, k, dilation, reps):
    g = np.ones((x.shape[0], k.shape[0], x.shape[2], x.shape[3]),
                dtype=x.dtype)
    impl.conv2d_forward(x, k, dilation)  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        impl.conv2d_forward(x, k, dilation)
        impl.conv2d_backward_input(g, k, dilation, x.shape[1])
        impl.conv2d_backward_kernel(x, g, k.shape, dilation)
    return (time.perf_counter() - t0) / reps


def main():
    print(f"active backend: {kernels.active_backend()}")
    if kernels.active_backend() == "pure":
        print("compiled extension not built; timing the pure backend only")
    cases = [
        # (B, Cin, Cout, L, T, dilation, reps)   training-shape cases first
        (128, 4, 4, 5, 150, (1, 2), 6),
        (128, 8, 8, 5, 150, (1, 2), 4),
        (128, 16, 16, 5, 150, (1, 4), 2),
        (1, 128, 128, 13, 150, (1, 2), 2),
        (1, 128, 128, 13, 150, (1, 8), 2),
    ]
    header = (f"{'B':>4} {'Cin':>4} {'Cout':>4} {'L':>3} {'T':>4} "
              f"{'dil':>6} {'compiled':>10} {'pure':>10} {'speedup':>8}")
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(0)
    for B, cin, cout, L, T, dil, reps in cases:
        x = np.ascontiguousarray(
            rng.standard_normal((B, cin, L, T)).astype(np.float32))
        k = np.ascontiguousarray(
            rng.standard_normal((cout, cin, 3, 3)).astype(np.float32))
        t_pure = time_backend(_conv_numpy, x, k, dil, reps)
        if kernels.active_backend() == "compiled":
            t_comp = time_backend(kernels, x, k, dil, reps)
            ratio = t_pure / t_comp
            print(f"{B:>4} {cin:>4} {cout:>4} {L:>3} {T:>4} "
                  f"{str(dil):>6} {t_comp * 1e3:>8.1f}ms {t_pure * 1e3:>8.1f}ms "
                  f"{ratio:>7.2f}x")
        else:
            print(f"{B:>4} {cin:>4} {cout:>4} {L:>3} {T:>4} "
                  f"{str(dil):>6} {'-':>10} {t_pure * 1e3:>8.1f}ms "
                  f"{'-':>8}")


if __name__ == "__main__":
    main()
