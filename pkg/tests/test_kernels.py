"""Both kernel variants (numba and pure numpy) must agree."""

import numpy as np
import pytest

from itftlab import _kernels

IMPLS = _kernels.implementations()
HAVE_BOTH = set(IMPLS) == {"numpy", "numba"}


def _random_dist(rng, n):
    p = rng.random(n) + 1e-3
    return p / p.sum()


@pytest.mark.skipif(not HAVE_BOTH, reason="numba unavailable")
def test_kl_variants_agree():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(1, 200))
        p = _random_dist(rng, n)
        q = _random_dist(rng, n)
        a = IMPLS["numpy"]["kl_bits"](p, q)
        b = IMPLS["numba"]["kl_bits"](p, q)
        assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.skipif(not HAVE_BOTH, reason="numba unavailable")
def test_js_half_variants_agree():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 200))
        p = _random_dist(rng, n)
        q = _random_dist(rng, n)
        # zero out disjoint chunks to exercise the skip branch
        p[: n // 3] = 0.0
        q[-(n // 3) or 1 :] = 0.0
        a = IMPLS["numpy"]["kl_vs_mix_bits"](p, q)
        b = IMPLS["numba"]["kl_vs_mix_bits"](p, q)
        assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.skipif(not HAVE_BOTH, reason="numba unavailable")
def test_adam_variants_agree():
    rng = np.random.default_rng(3)
    n = 257
    base_p = rng.normal(size=n)
    g = rng.normal(size=n)
    states = {}
    for name, impl in IMPLS.items():
        p = base_p.copy()
        m = np.zeros(n)
        v = np.zeros(n)
        for t in range(1, 6):
            impl["adam_step"](p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.9**t, 0.999**t)
        states[name] = (p, m, v)
    for a, b in zip(states["numpy"], states["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@pytest.mark.skipif(not HAVE_BOTH, reason="numba unavailable")
def test_bpe_word_variants_agree(tiny_spm):
    from itftlab.textprep import UNK_ID, _word_symbols

    keys, ranks, news = tiny_spm._merge_table
    sym_to_id = tiny_spm._sym_to_id
    rng = np.random.default_rng(4)
    alphabet = [c for c in tiny_spm.base_vocab if c != tiny_spm.marker]
    for _ in range(50):
        word = "".join(rng.choice(alphabet, size=rng.integers(1, 12)))
        ids = np.array(
            [sym_to_id.get(s, UNK_ID) for s in _word_symbols(tiny_spm, word)], dtype=np.int64
        )
        a = IMPLS["numpy"]["bpe_word"](ids, keys, ranks, news)
        b = IMPLS["numba"]["bpe_word"](ids, keys, ranks, news)
        assert list(a) == list(b)


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("ITFT_LAB_NUMBA", "0")
    name, impl = _kernels._select_backend()
    assert name == "numpy"
    assert impl is _kernels._NUMPY_IMPL
