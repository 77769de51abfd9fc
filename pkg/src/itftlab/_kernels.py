"""Hot numeric kernels, each in two variants: numba @njit and plain numpy.

The active variant is chosen at import time from the ITFT_LAB_NUMBA env var:

    unset / "1" / "auto"  -> numba when importable, numpy otherwise
    "0" / "off" / "false" -> force the pure-numpy path

Both variants of a kernel compute the same quantity; they may differ in
floating-point summation order only.  `benchmarks/bench_kernels.py` times
the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np

# Pair keys for the subword merge kernel are encoded as a * PAIR_BASE + b.
# Caps the symbol id space; far above any realistic vocabulary here.
PAIR_BASE = np.int64(1) << np.int64(21)

_NO_RANK = np.int64(1) << np.int64(62)


# ---------------------------------------------------------------------------
# pure-numpy variants
# ---------------------------------------------------------------------------

def _kl_bits_np(p: np.ndarray, q: np.ndarray) -> float:
    # aligned arrays over support(P); caller guarantees p > 0 and q > 0
    return float(np.sum(p * np.log2(p / q)))


def _kl_vs_mix_bits_np(x: np.ndarray, y: np.ndarray) -> float:
    # sum_i x_i * log2(x_i / m_i) with m = (x + y) / 2, skipping x_i == 0
    mask = x > 0.0
    xs = x[mask]
    ys = y[mask]
    return float(np.sum(xs * np.log2(2.0 * xs / (xs + ys))))


def _adam_step_np(p, g, m, v, lr, b1, b2, eps, b1t, b2t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    mhat = m / (1.0 - b1t)
    vhat = v / (1.0 - b2t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def _bpe_word_np(ids, keys, ranks, news):
    """Apply ranked merges to one word's symbol-id sequence.

    Repeatedly merges the present pair with the lowest rank, all
    occurrences left to right; equivalent to replaying the merge list in
    training order.
    """
    ids = ids.copy()
    nk = keys.shape[0]
    while ids.shape[0] > 1 and nk > 0:
        pk = ids[:-1] * PAIR_BASE + ids[1:]
        j = np.searchsorted(keys, pk)
        j_clipped = np.minimum(j, nk - 1)
        hit = keys[j_clipped] == pk
        if not hit.any():
            break
        cand = np.where(hit, ranks[j_clipped], _NO_RANK)
        best = int(np.argmin(cand))
        a = int(ids[best])
        b = int(ids[best + 1])
        new = int(news[j_clipped[best]])
        out = []
        i = 0
        n = ids.shape[0]
        while i < n:
            if i < n - 1 and ids[i] == a and ids[i + 1] == b:
                out.append(new)
                i += 2
            else:
                out.append(int(ids[i]))
                i += 1
        ids = np.asarray(out, dtype=np.int64)
    return ids


_NUMPY_IMPL = {
    "kl_bits": _kl_bits_np,
    "kl_vs_mix_bits": _kl_vs_mix_bits_np,
    "adam_step": _adam_step_np,
    "bpe_word": _bpe_word_np,
}


# ---------------------------------------------------------------------------
# numba variants
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def kl_bits(p, q):
        acc = 0.0
        for i in range(p.shape[0]):
            acc += p[i] * np.log2(p[i] / q[i])
        return acc

    @njit(cache=True)
    def kl_vs_mix_bits(x, y):
        acc = 0.0
        for i in range(x.shape[0]):
            if x[i] > 0.0:
                acc += x[i] * np.log2(2.0 * x[i] / (x[i] + y[i]))
        return acc

    @njit(cache=True)
    def adam_step(p, g, m, v, lr, b1, b2, eps, b1t, b2t):
        for i in range(p.shape[0]):
            m[i] = b1 * m[i] + (1.0 - b1) * g[i]
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
            mhat = m[i] / (1.0 - b1t)
            vhat = v[i] / (1.0 - b2t)
            p[i] -= lr * mhat / (np.sqrt(vhat) + eps)

    @njit(cache=True)
    def bpe_word(ids_in, keys, ranks, news):
        n = ids_in.shape[0]
        buf = ids_in.copy()
        nk = keys.shape[0]
        while n > 1 and nk > 0:
            best_rank = _NO_RANK
            best_j = -1
            for i in range(n - 1):
                key = buf[i] * PAIR_BASE + buf[i + 1]
                lo = 0
                hi = nk
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if keys[mid] < key:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo < nk and keys[lo] == key and ranks[lo] < best_rank:
                    best_rank = ranks[lo]
                    best_j = lo
            if best_j < 0:
                break
            a = keys[best_j] // PAIR_BASE
            b = keys[best_j] % PAIR_BASE
            new = news[best_j]
            w = 0
            i = 0
            while i < n:
                if i < n - 1 and buf[i] == a and buf[i + 1] == b:
                    buf[w] = new
                    i += 2
                else:
                    buf[w] = buf[i]
                    i += 1
                w += 1
            n = w
        return buf[:n].copy()

    return {
        "kl_bits": kl_bits,
        "kl_vs_mix_bits": kl_vs_mix_bits,
        "adam_step": adam_step,
        "bpe_word": bpe_word,
    }


def _select_backend() -> tuple[str, dict]:
    flag = os.environ.get("ITFT_LAB_NUMBA", "auto").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return "numpy", _NUMPY_IMPL
    try:
        return "numba", _build_numba_impl()
    except ImportError:
        if flag in ("1", "on", "true", "yes"):
            raise
        return "numpy", _NUMPY_IMPL


BACKEND, _IMPL = _select_backend()

kl_bits = _IMPL["kl_bits"]
kl_vs_mix_bits = _IMPL["kl_vs_mix_bits"]
adam_step = _IMPL["adam_step"]
bpe_word = _IMPL["bpe_word"]


def implementations() -> dict[str, dict]:
    """Both variants keyed by backend name, for tests and benchmarks."""
    out = {"numpy": _NUMPY_IMPL}
    try:
        out["numba"] = _build_numba_impl()
    except ImportError:
        pass
    return out
