#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]

Times every kernel in itftlab._kernels in both variants on realistic
workloads and prints a table with the speedup.  The first numba call
includes JIT compilation; a warmup call is made before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from itftlab import _kernels
from itftlab import textprep as tp


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_divergence(impl, repeats):
    rng = np.random.default_rng(1)
    n = 50_000
    p = rng.random(n)
    p /= p.sum()
    q = rng.random(n)
    q /= q.sum()
    p2 = p.copy()
    p2[: n // 4] = 0.0
    kl = impl["kl_bits"]
    mix = impl["kl_vs_mix_bits"]

    def work():
        for _ in range(20):
            kl(p, q)
            mix(p2, q)

    work()  # warmup / compile
    return _time(work, repeats)


def bench_adam(impl, repeats):
    rng = np.random.default_rng(2)
    n = 266_240  # default model size
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)
    step = impl["adam_step"]

    def work():
        for t in range(1, 21):
            step(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.9**t, 0.999**t)

    work()
    return _time(work, repeats)


def bench_bpe(impl, repeats):
    rng = np.random.default_rng(3)
    words = [
        "".join(rng.choice(list("abcdefghijklmnop"), size=rng.integers(3, 12)))
        for _ in range(400)
    ]
    pool = [" ".join(rng.choice(words, size=8)) for _ in range(300)]
    model = tp.train_subword(pool, vocab_size=600)
    keys, ranks, news = model._merge_table
    sym_to_id = model._sym_to_id
    word_ids = [
        np.array(
            [sym_to_id.get(s, tp.UNK_ID) for s in [model.marker] + list(w)], dtype=np.int64
        )
        for w in words
    ]
    bpe = impl["bpe_word"]

    def work():
        for ids in word_ids:
            bpe(ids, keys, ranks, news)

    work()
    return _time(work, repeats)


BENCHES = {
    "divergence cores (50k-token support, 20 calls)": bench_divergence,
    "fused adam step (266k params, 20 steps)": bench_adam,
    "subword merge application (400 words)": bench_bpe,
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    impls = _kernels.implementations()
    if "numba" not in impls:
        print("numba not importable; only the numpy path is available")
    print(f"active backend: {_kernels.BACKEND}\n")
    width = max(len(name) for name in BENCHES)
    header = f"{'kernel workload'.ljust(width)}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, bench in BENCHES.items():
        t_np = bench(impls["numpy"], args.repeats)
        if "numba" in impls:
            t_nb = bench(impls["numba"], args.repeats)
            ratio = f"{t_np / t_nb:7.1f}x"
            nb_col = f"{t_nb * 1e3:9.2f}ms"
        else:
            ratio = "     -"
            nb_col = "        -"
        print(f"{name.ljust(width)}  {t_np * 1e3:9.2f}ms  {nb_col}  {ratio}")


if __name__ == "__main__":
    main()
