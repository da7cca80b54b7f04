"""Compare the compiled and NumPy kernel backends.

Run: python benchmarks/bench_kernels.py [--n 10000] [--d 5] [--V 16]
"""

import argparse
import time

import numpy as np

from mixflowlm import _kernels


def instance(rng, n, V, d):
    logw = rng.normal(size=(n, V))
    means = rng.normal(scale=1.5, size=(n, V, d))
    ls = rng.uniform(-1.2, 0.5, size=(n, V))
    w = np.exp(logw - logw.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    k = (rng.random((n, 1)) > np.cumsum(w, 1)).sum(1).clip(0, V - 1)
    idx = np.arange(n)
    z = means[idx, k] + np.exp(ls[idx, k])[:, None] * rng.standard_normal((n, d))
    return z, logw, means, ls


def timeit(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--V", type=int, default=16)
    p.add_argument("--repeat", type=int, default=3)
    a = p.parse_args()
    rng = np.random.default_rng(0)
    z, logw, means, ls = instance(rng, a.n, a.V, a.d)
    small = instance(rng, 8, a.V, a.d)
    x = rng.normal(scale=10, size=a.n * a.V)
    print("backend,op,n,seconds")
    for name, k in _kernels.AVAILABLE.items():
        u, _ = k.mixd_forward(z, logw, means, ls)
        su, _ = k.mixd_forward(*small)
        rows = [
            ("log_ndtr", x.size, lambda: k.log_ndtr(x)),
            ("mixd_forward", a.n, lambda: k.mixd_forward(z, logw, means, ls)),
            ("mixd_inverse", a.n, lambda: k.mixd_inverse(u, logw, means, ls)),
            # sequential sampling calls the inverse on small batches many times
            ("mixd_inverse_small_x200", 8, lambda: [k.mixd_inverse(su, *small[1:]) for _ in range(200)]),
        ]
        for op, n, fn in rows:
            print(f"{name},{op},{n},{timeit(fn, a.repeat):.4f}")


if __name__ == "__main__":
    main()
