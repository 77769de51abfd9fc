import math

import numpy as np
import pytest

from itftlab import textprep as tp
from itftlab import toytrainer as tt
from itftlab.corpus import ParallelCorpus
from itftlab.errors import TrainerError


def small_cfg(vocab=16, dropout=0.0):
    return tt.ModelConfig(
        vocab_size=vocab, d_model=8, heads=2, enc_layers=2, dec_layers=2,
        ffn_dim=16, dropout=dropout, max_len=32,
    )


def random_batch(rng, vocab, n, src_len=(3, 8), tgt_len=(2, 7)):
    src = [list(rng.integers(4, vocab, size=rng.integers(*src_len))) for _ in range(n)]
    tgt = [list(rng.integers(4, vocab, size=rng.integers(*tgt_len))) for _ in range(n)]
    return src, tgt


class TestInit:
    def test_deterministic(self):
        a = tt.init_model(small_cfg(), seed=5)
        b = tt.init_model(small_cfg(), seed=5)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_seed_changes_params(self):
        a = tt.init_model(small_cfg(), seed=5)
        b = tt.init_model(small_cfg(), seed=6)
        assert not np.array_equal(a.params["src_emb"], b.params["src_emb"])

    def test_heads_must_divide(self):
        with pytest.raises(TrainerError, match="divisible"):
            tt.ModelConfig(vocab_size=16, d_model=10, heads=4)

    def test_parameter_count_formula(self):
        cfg = tt.ModelConfig(vocab_size=512)
        ckpt = tt.init_model(cfg, seed=0)
        d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
        att = 4 * d * d + 4 * d
        ln = 2 * d
        ffn = d * f + f + f * d + d
        enc = cfg.enc_layers * (att + ffn + 2 * ln)
        dec = cfg.dec_layers * (2 * att + ffn + 3 * ln)
        expected = 2 * v * d + enc + dec + d * v + v
        assert ckpt.n_parameters() == expected == 266240

    def test_lineage_starts_with_init(self):
        ckpt = tt.init_model(small_cfg(), seed=3)
        assert ckpt.lineage == ({"stage": "init", "seed": 3},)


class TestForward:
    def test_uniformity_at_init(self, rng):
        ckpt = tt.init_model(small_cfg(), seed=1)
        src, tgt = random_batch(rng, 16, 6)
        _, loss = tt.forward(ckpt, src, tgt)
        assert loss == pytest.approx(math.log(16), rel=0.05)

    def test_batching_consistency(self, rng):
        # an example's logits are the same alone and inside a batch of 10
        ckpt = tt.init_model(small_cfg(), seed=2)
        src, tgt = random_batch(rng, 16, 10)
        solo_logits, solo_loss = tt.forward(ckpt, src[:1], tgt[:1])
        batch_logits, _ = tt.forward(ckpt, src, tgt)
        n = solo_logits.shape[1]
        np.testing.assert_allclose(batch_logits[0, :n], solo_logits[0], atol=1e-6)

    def test_pad_conservation(self, rng):
        # appending PAD to targets never changes the loss
        ckpt = tt.init_model(small_cfg(), seed=3)
        src, tgt = random_batch(rng, 16, 4)
        _, base = tt.forward(ckpt, src, tgt)
        padded = [t + [tp.PAD_ID] * 3 for t in tgt]
        _, with_pad = tt.forward(ckpt, src, padded)
        assert with_pad == pytest.approx(base, abs=1e-9)

    def test_logits_shape(self, rng):
        ckpt = tt.init_model(small_cfg(), seed=4)
        src, tgt = random_batch(rng, 16, 3, tgt_len=(4, 5))
        logits, _ = tt.forward(ckpt, src, tgt)
        assert logits.shape == (3, max(len(t) for t in tgt) + 1, 16)

    def test_over_length_rejected(self):
        ckpt = tt.init_model(small_cfg(), seed=5)
        with pytest.raises(TrainerError, match="max_len"):
            tt.forward(ckpt, [[5] * 40], [[5]])

    def test_id_out_of_range(self):
        ckpt = tt.init_model(small_cfg(), seed=5)
        with pytest.raises(TrainerError, match="outside vocab"):
            tt.forward(ckpt, [[99]], [[5]])


class TestGradients:
    def test_gradient_check_quick(self, rng):
        # small smoke version; the full sweep lives in the acceptance suite
        cfg = small_cfg()
        ckpt = tt.init_model(cfg, seed=11)
        src, tgt = random_batch(rng, 16, 2)
        from itftlab.toytrainer import _Dropout, _model_bwd, _model_fwd, _pad_batch

        s = _pad_batch(src)
        ti = _pad_batch([[tp.BOS_ID] + t for t in tgt])
        to = _pad_batch([t + [tp.EOS_ID] for t in tgt])
        _, _, caches = _model_fwd(ckpt.params, cfg, s, ti, to, _Dropout(0.0, None))
        grads = _model_bwd(ckpt.params, cfg, caches)
        h = 1e-5
        check_rng = np.random.default_rng(0)
        for name in ("src_emb", "enc0.att.wq", "dec1.cross.wo", "dec0.ffn.w1",
                     "enc1.ln2.g", "out_w", "out_b"):
            p = ckpt.params[name]
            flat = int(check_rng.integers(p.size))
            orig = p.flat[flat]
            p.flat[flat] = orig + h
            lp, _, _ = _model_fwd(ckpt.params, cfg, s, ti, to, _Dropout(0.0, None))
            p.flat[flat] = orig - h
            lm, _, _ = _model_fwd(ckpt.params, cfg, s, ti, to, _Dropout(0.0, None))
            p.flat[flat] = orig
            num = (lp - lm) / (2 * h)
            ana = grads[name].flat[flat]
            assert abs(ana - num) / max(1e-8, abs(ana) + abs(num)) < 1e-4


def tiny_corpus():
    pairs = tuple(
        (f"ka mi ro {i % 3}", f"pa qi do {i % 3}") for i in range(12)
    )
    return ParallelCorpus(
        id="tiny", source_lang="xx", target_lang="yy", domain="unit", pairs=pairs
    )


class TestFineTune:
    def _setup(self, dropout=0.1):
        corpus = tiny_corpus()
        pool = [s for s, _ in corpus.pairs] + [t for _, t in corpus.pairs]
        spm = tp.train_subword(pool, vocab_size=60)
        cfg = tt.ModelConfig(
            vocab_size=spm.vocab_size, d_model=16, heads=2, enc_layers=1, dec_layers=1,
            ffn_dim=32, dropout=dropout, max_len=32, vocab_id=spm.model_id,
        )
        ckpt = tt.init_model(cfg, seed=222)
        return corpus, spm, ckpt

    def test_deterministic_bitwise(self):
        corpus, spm, ckpt = self._setup()
        cfg = tt.TrainConfig(epochs=2, seed=222)
        enc = tt.make_text_encoder(spm)
        a = tt.fine_tune(ckpt, corpus, cfg, enc)
        b = tt.fine_tune(ckpt, corpus, cfg, enc)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_input_checkpoint_unmodified(self):
        corpus, spm, ckpt = self._setup()
        before = {k: p.copy() for k, p in ckpt.params.items()}
        tt.fine_tune(ckpt, corpus, tt.TrainConfig(epochs=1), tt.make_text_encoder(spm))
        assert all(np.array_equal(before[k], ckpt.params[k]) for k in before)

    def test_lineage_appended(self):
        corpus, spm, ckpt = self._setup()
        out = tt.fine_tune(
            ckpt, corpus, tt.TrainConfig(epochs=2), tt.make_text_encoder(spm), stage="intermediate"
        )
        assert out.lineage[-1] == {
            "stage": "intermediate", "corpus_id": "tiny", "size": 12, "epochs": 2, "seed": 222,
        }
        assert out.step > ckpt.step

    def test_over_length_pair_named(self):
        corpus, spm, ckpt = self._setup()
        long_corpus = ParallelCorpus(
            id="long", source_lang="xx", target_lang="yy", domain="d",
            pairs=(("ka " * 40, "pa"),),
        )
        with pytest.raises(TrainerError, match="pair 0"):
            tt.fine_tune(ckpt, long_corpus, tt.TrainConfig(), tt.make_text_encoder(spm))


class TestGreedyDecode:
    def test_zero_budget(self):
        ckpt = tt.init_model(small_cfg(), seed=1)
        assert tt.greedy_decode(ckpt, [5, 6], 0) == []

    def test_idempotent(self, rng):
        ckpt = tt.init_model(small_cfg(), seed=1)
        src = [5, 6, 7]
        assert tt.greedy_decode(ckpt, src, 10) == tt.greedy_decode(ckpt, src, 10)

    def test_batch_matches_single(self, rng):
        ckpt = tt.init_model(small_cfg(), seed=2)
        srcs = [list(rng.integers(4, 16, size=rng.integers(2, 8))) for _ in range(5)]
        batched = tt.greedy_decode_batch(ckpt, srcs, 8)
        singles = [tt.greedy_decode(ckpt, s, 8) for s in srcs]
        assert batched == singles


class TestCheckpointIO:
    def test_roundtrip(self, tmp_path):
        ckpt = tt.init_model(small_cfg(), seed=9)
        path = tmp_path / "model.npz"
        tt.save_checkpoint(ckpt, path)
        loaded = tt.load_checkpoint(path)
        assert loaded.config == ckpt.config
        assert loaded.step == ckpt.step
        assert loaded.lineage == ckpt.lineage
        assert all(np.array_equal(loaded.params[k], ckpt.params[k]) for k in ckpt.params)

    def test_bad_format(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
        with pytest.raises(TrainerError, match="format"):
            tt.load_checkpoint(path)


class TestSyntheticDomains:
    def test_deterministic(self):
        a1, b1 = tt.gen_synthetic_domains(0.5, 20, 40, 64, seed=3)
        a2, b2 = tt.gen_synthetic_domains(0.5, 20, 40, 64, seed=3)
        assert a1.pairs == a2.pairs and b1.pairs == b2.pairs

    def test_shared_lexicon_size(self):
        a, b = tt.gen_synthetic_domains(0.5, 20, 40, 400, seed=3)
        vocab_a = {w for s, _ in a.pairs for w in s.split() if w.startswith("k")}
        vocab_b = {w for s, _ in b.pairs for w in s.split() if w.startswith("k")}
        # windows overlap in exactly floor(0.5 * 40) = 20 indices
        assert vocab_a & vocab_b
        assert len(vocab_a | vocab_b) <= 60

    def test_translation_is_mapped_and_swapped(self):
        a, _ = tt.gen_synthetic_domains(1.0, 10, 10, 20, seed=4)
        for src, tgt in a.pairs:
            src_tokens = src.split()
            tgt_tokens = tgt.split()
            assert len(src_tokens) == len(tgt_tokens)
            mapped = []
            for tok in src_tokens:
                if tok in tt.FUNCTION_WORDS_SRC:
                    mapped.append(tt.FUNCTION_WORDS_TGT[tt.FUNCTION_WORDS_SRC.index(tok)])
                else:
                    mapped.append("v" + tok[1:])
            for i in range(0, len(mapped) - 1, 2):
                mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
            assert tgt_tokens == mapped

    def test_grammar_seed_shares_templates(self):
        train = tt.synthetic_domain_family([0], n_pairs=50, seed=1, grammar_seed=99)
        test = tt.synthetic_domain_family([0], n_pairs=50, seed=2, grammar_seed=99)
        # same grammar, different sentences
        assert train[0].pairs != test[0].pairs

    def test_bad_overlap(self):
        with pytest.raises(TrainerError, match="overlap"):
            tt.gen_synthetic_domains(1.5, 10, 10, 10, seed=1)
