"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the desk configuration: pairwise distances for one training
batch of token sets and the GRU scan of a 24-step feature sequence.
"""
import argparse
import timeit

import numpy as np

from crossalign.kernels import available_backends


def cases(rng):
    X = rng.normal(size=(16, 8, 32))
    Y = rng.normal(size=(16, 12, 32))
    G = rng.normal(size=(16, 8, 12))
    H = 16
    xp = rng.normal(size=(16, 24, 3 * H))
    Wh = rng.normal(size=(H, 3 * H)) * 0.25
    bh = rng.normal(size=3 * H) * 0.1
    g_hs = rng.normal(size=(16, 24, H))
    return {
        "sqdist": lambda k: k.sqdist(X, Y),
        "sqdist_backward": lambda k: k.sqdist_backward(G, X, Y),
        "gru_scan": lambda k: k.gru_scan(xp, Wh, bh, False),
        "gru_scan_backward": (lambda k, fwd={}: k.gru_scan_backward(
            g_hs, Wh, *fwd.setdefault(k.BACKEND, k.gru_scan(xp, Wh, bh, True)), True)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    backends = available_backends()
    table = cases(np.random.default_rng(0))
    names = list(backends)
    print(f"{'kernel':<20}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for kernel, fn in table.items():
        times = {}
        for name, mod in backends.items():
            fn(mod)  # warm up
            best = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3))
            times[name] = 1e6 * best / args.repeat
        row = f"{kernel:<20}" + "".join(f"{times[n]:>16.1f}" for n in names)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
