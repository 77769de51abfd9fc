"""Acceptance suite: one test per criterion, one printed PASS line each.

Run with `pytest -s tests/test_acceptance.py -v` to see the lines.  The
desk-scale grid (12 runs, 3 seeds) executes once as a session fixture and
feeds the fine-tuning-effect and correlation criteria.
"""

import dataclasses
import json
import math
import signal
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from itftlab import divergence as dv
from itftlab import metrics
from itftlab import orchestrator as orch
from itftlab import textprep as tp
from itftlab import toytrainer as tt
from itftlab.corpus import ParallelCorpus
from itftlab.errors import MetricsError

FIXTURES = Path(__file__).parent / "fixtures"

GRID_SEEDS = (222, 223, 224)
GRID_LEXICON = 40
GRID_GRAMMAR = 40
GRID_TRAIN_PAIRS = 2048
GRID_TEST_PAIRS = 64
GRID_TRAIN_CFG = dict(epochs=4, lr=1e-3, batch_size=10)
GRID_RUNTIME_LIMIT_S = 30 * 60


def _pass(name: str, detail: str = ""):
    suffix = f"  ({detail})" if detail else ""
    print(f"\nACCEPTANCE PASS: {name}{suffix}")


def _random_distribution(rng, max_support=40):
    n = int(rng.integers(1, max_support))
    tokens = [f"t{i}" for i in rng.choice(500, size=n, replace=False)]
    w = rng.random(n) + 1e-6
    w /= w.sum()
    return dv.TokenDistribution(dict(zip(tokens, w.tolist())), n, n)


# ---------------------------------------------------------------------------
# divergence criteria
# ---------------------------------------------------------------------------

def test_jsd_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(101)
    for _ in range(1000):
        p = _random_distribution(rng)
        q = _random_distribution(rng)
        v = dv.js_divergence(p, q)
        assert 0.0 <= v <= 1.0
        assert abs(v - dv.js_divergence(q, p)) <= 1e-12
        assert abs(dv.js_divergence(p, p)) <= 1e-12

    # disjoint supports, exactly representable masses -> exactly 1.0
    p = dv.build_distribution(Counter({"a": 1, "b": 1}))
    q = dv.build_distribution(Counter({"c": 2, "d": 2}))
    assert dv.js_divergence(p, q) == 1.0

    hand = dv.js_divergence(
        dv.build_distribution(Counter({"a": 1})),
        dv.build_distribution(Counter({"a": 1, "b": 1})),
    )
    assert hand == pytest.approx(0.311278, abs=1e-6)

    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    _pass("JSD suite", f"1000 pairs in {elapsed:.2f}s")


def test_kl_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(202)
    for _ in range(1000):
        q = _random_distribution(rng, max_support=40)
        tokens = sorted(q.probs)
        k = max(1, int(rng.integers(1, len(tokens) + 1)))
        sub = tokens[:k]
        w = rng.random(k) + 1e-6
        w /= w.sum()
        p = dv.TokenDistribution(dict(zip(sub, w.tolist())), k, k)
        assert dv.kl_divergence(p, q) >= 0.0

    d = dv.build_distribution(Counter({"x": 2, "y": 3}))
    assert dv.kl_divergence(d, d) == 0.0
    one_bit = dv.kl_divergence(
        dv.build_distribution(Counter({"a": 1})),
        dv.build_distribution(Counter({"a": 1, "b": 1})),
    )
    assert one_bit == pytest.approx(1.0, abs=1e-12)

    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    _pass("KL suite", f"1000 pairs in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# BLEU criteria
# ---------------------------------------------------------------------------

def test_bleu_oracle_equivalence():
    t0 = time.monotonic()
    cases = json.loads((FIXTURES / "bleu_oracle.json").read_text(encoding="utf-8"))["cases"]
    assert len(cases) >= 20
    names = {c["name"] for c in cases}
    assert any("smoothing" in n for n in names)
    assert any(c["expected"]["bp"] < 1.0 for c in cases)
    for case in cases:
        result = metrics.bleu(case["hyps"], case["refs"])
        assert result.score == pytest.approx(case["expected"]["score"], abs=1e-4), case["name"]
        assert result.brevity_penalty == pytest.approx(case["expected"]["bp"], abs=1e-6)
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _pass("BLEU oracle equivalence", f"{len(cases)} fixture corpora in {elapsed:.2f}s")


def test_spbleu_contract(tiny_spm):
    sents = ["the quick brown fox", "lazy dogs jump over boxes"]
    perfect = metrics.sp_bleu(tiny_spm, sents, list(sents))
    assert perfect.score == 100.0

    char_model = tp.SubwordModel(
        base_vocab=tiny_spm.base_vocab, merges=(), vocab_size=len(tiny_spm.base_vocab) + 4
    )
    hyps = ["the quick brown fox", "lazy dogs jump", "pack my box with jugs",
            "daft zebras vex", "how quick the jump", "dozen liquor jugs",
            "my box jumps", "the lazy fox", "brown dog over fox", "vexingly daft"]
    refs = ["the quick brown dog", "lazy dog jumps", "pack my box with dogs",
            "daft zebras jump", "how quickly the jump", "dozen liquor boxes",
            "my dog jumps", "the lazy dog", "brown fox over dog", "vexingly quick"]
    via_model = metrics.sp_bleu(char_model, hyps, refs)

    def char_tokens(s):
        out = []
        for word in s.split(" "):
            out.append(char_model.marker)
            out.extend(word)
        return out

    via_chars = metrics.bleu([char_tokens(h) for h in hyps], [char_tokens(r) for r in refs])
    assert via_model.score == pytest.approx(via_chars.score, abs=1e-6)
    assert f"spm-{char_model.model_id}" in via_model.signature
    _pass("spBLEU contract", f"char-model equivalence at {via_model.score:.4f}")


# ---------------------------------------------------------------------------
# subword criteria
# ---------------------------------------------------------------------------

def test_subword_round_trip_property(tiny_spm):
    rng = np.random.default_rng(303)
    alphabet = sorted(set(tiny_spm.base_vocab) - {tiny_spm.marker}) + [" "]
    for _ in range(1000):
        n = int(rng.integers(0, 50))
        s = "".join(rng.choice(alphabet, size=n))
        assert tp.decode(tiny_spm, tp.encode(tiny_spm, s)) == s

    model = tp.train_subword(["abababab"], vocab_size=8)
    assert model.merges == (("a", "b"),)
    ids = tp.encode(model, "abab")
    assert [model.symbols[i] for i in ids] == [model.marker, "ab", "ab"]
    _pass("subword round trip", "1000 random strings + 1-merge fixture")


# ---------------------------------------------------------------------------
# trainer criteria
# ---------------------------------------------------------------------------

def test_gradient_check():
    t0 = time.monotonic()
    cfg = tt.ModelConfig(
        vocab_size=16, d_model=8, heads=2, enc_layers=2, dec_layers=2,
        ffn_dim=16, dropout=0.0, max_len=32,
    )
    ckpt = tt.init_model(cfg, seed=7)
    rng = np.random.default_rng(17)
    src = [list(rng.integers(4, 16, size=rng.integers(3, 9))) for _ in range(3)]
    tgt = [list(rng.integers(4, 16, size=rng.integers(2, 8))) for _ in range(3)]

    from itftlab.textprep import BOS_ID, EOS_ID
    from itftlab.toytrainer import _Dropout, _model_bwd, _model_fwd, _pad_batch

    s = _pad_batch(src)
    ti = _pad_batch([[BOS_ID] + t for t in tgt])
    to = _pad_batch([t + [EOS_ID] for t in tgt])
    _, _, caches = _model_fwd(ckpt.params, cfg, s, ti, to, _Dropout(0.0, None))
    grads = _model_bwd(ckpt.params, cfg, caches)

    h = 1e-5
    checked = 0
    worst = 0.0
    names = list(ckpt.params)
    per_tensor = max(3, math.ceil(210 / len(names)))
    for name in names:
        p = ckpt.params[name]
        idxs = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        for flat in idxs:
            orig = p.flat[flat]
            p.flat[flat] = orig + h
            lp, _, _ = _model_fwd(ckpt.params, cfg, s, ti, to, _Dropout(0.0, None))
            p.flat[flat] = orig - h
            lm, _, _ = _model_fwd(ckpt.params, cfg, s, ti, to, _Dropout(0.0, None))
            p.flat[flat] = orig
            num = (lp - lm) / (2 * h)
            ana = grads[name].flat[flat]
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
            checked += 1
    elapsed = time.monotonic() - t0
    assert checked >= 200
    assert worst < 1e-4
    assert elapsed < 60.0
    _pass("gradient check", f"{checked} params, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_overfit_and_decode():
    texts = ["ka ro mi la", "zu ba ni to", "fa ke lo mi", "ra su to ka",
             "mi lo ke za", "to ni ba ru", "la mi ro ka", "ke fa zu lo"]
    tgts = ["pa do qi ma", "vu ca oi po", "ga me no qi", "sa tu po pa",
            "qi no me va", "po oi ca su", "ma qi do pa", "me ga vu no"]
    spm = tp.train_subword(texts + tgts, vocab_size=80)
    corpus = ParallelCorpus(
        id="overfit8", source_lang="xx", target_lang="yy", domain="unit",
        pairs=tuple(zip(texts, tgts)),
    )
    cfg = tt.ModelConfig(
        vocab_size=spm.vocab_size, d_model=32, heads=2, enc_layers=2, dec_layers=2,
        ffn_dim=64, dropout=0.0, max_len=32, vocab_id=spm.model_id,
    )
    base = tt.init_model(cfg, seed=222)
    encoder = tt.make_text_encoder(spm)
    # batch of 10 over 8 pairs = 1 step per epoch; 300 epochs = 300 steps
    trained = tt.fine_tune(
        base, corpus, tt.TrainConfig(epochs=300, lr=1e-3, batch_size=10, seed=222), encoder
    )
    assert trained.step == 300
    srcs = [encoder(s, t)[0][0] for s, t in corpus.pairs]
    tgs = [encoder(s, t)[0][1] for s, t in corpus.pairs]
    _, loss = tt.forward(trained, srcs, tgs)
    assert loss < 0.1
    decoded = tt.greedy_decode_batch(trained, srcs, 24)
    assert decoded == tgs
    _pass("overfit check", f"loss {loss:.4f} after 300 steps, 8/8 decoded exactly")


# ---------------------------------------------------------------------------
# desk-scale grid (shared by the fine-tuning-effect and correlation criteria)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_grid():
    t0 = time.monotonic()
    train = tt.synthetic_domain_family(
        [40, 20], lexicon_size=GRID_LEXICON, grammar_size=GRID_GRAMMAR,
        n_pairs=GRID_TRAIN_PAIRS, seed=222, names=["intA", "finB"],
    )
    tests_raw = tt.synthetic_domain_family(
        [20, 30, 40, 50], lexicon_size=GRID_LEXICON, grammar_size=GRID_GRAMMAR,
        n_pairs=GRID_TEST_PAIRS, seed=1222, grammar_seed=222,
        names=["finB-test", "t-near", "t-mid", "t-far"],
    )
    # the window-20 test set shares the final task's domain label
    tests = [dataclasses.replace(tests_raw[0], domain="finB")] + list(tests_raw[1:])
    store = {c.id: c for c in list(train) + tests}

    pool = []
    for c in train:
        pool.extend(c.source_texts())
        pool.extend(c.target_texts())
    spm = tp.train_subword(pool, vocab_size=300)
    backend = orch.ToyBackend(spm, max_decode_len=32, max_len=48)

    plans = orch.plan_grid(
        store,
        intermediate_corpus="intA",
        intermediate_sizes=[0, GRID_TRAIN_PAIRS],
        final_corpus="finB",
        final_sizes=[GRID_TEST_PAIRS, GRID_TRAIN_PAIRS],
        tests=[("finB-test", "in"), ("t-near", "near"), ("t-mid", "mid"), ("t-far", "far")],
        seeds=list(GRID_SEEDS),
        train=tt.TrainConfig(**GRID_TRAIN_CFG),
    )
    records = orch.run_grid(plans, backend, store)
    runtime = time.monotonic() - t0

    prep = tp.DivergencePrepConfig(
        stopwords=frozenset(tt.FUNCTION_WORDS_SRC) | frozenset(tt.FUNCTION_WORDS_TGT)
    )
    matrix = dv.matrix_from_corpora(train, tests, prep, train_size=None, test_size=None)
    return {
        "records": records,
        "matrix": matrix,
        "backend": backend,
        "store": store,
        "plans": plans,
        "runtime": runtime,
    }


def _mean_in_domain(records, isize, fsize):
    values = []
    for r in records:
        if (r.intermediate_size or 0) == isize and r.final_size == fsize:
            values.extend(e["score"] for e in r.scores if e["in_domain"])
    return float(np.mean(values))


def test_itft_directional_effect(desk_grid):
    records = desk_grid["records"]
    assert all(r.status == "ok" for r in records)
    b_small = _mean_in_domain(records, 0, GRID_TEST_PAIRS)
    i_small = _mean_in_domain(records, GRID_TRAIN_PAIRS, GRID_TEST_PAIRS)
    b_large = _mean_in_domain(records, 0, GRID_TRAIN_PAIRS)
    i_large = _mean_in_domain(records, GRID_TRAIN_PAIRS, GRID_TRAIN_PAIRS)
    gap_small = i_small - b_small
    gap_large = i_large - b_large
    assert gap_small > 0.0  # two-stage beats the small-data baseline
    assert gap_large < gap_small  # and the gain saturates with final-task data
    assert desk_grid["runtime"] < GRID_RUNTIME_LIMIT_S
    _pass(
        "two-stage effect + saturation",
        f"gap@{GRID_TEST_PAIRS}={gap_small:.2f}, gap@{GRID_TRAIN_PAIRS}={gap_large:.2f}, "
        f"grid {desk_grid['runtime']:.0f}s over {len(GRID_SEEDS)} seeds",
    )


def test_divergence_overlap_monotonicity():
    prep = tp.DivergencePrepConfig(
        stopwords=frozenset(tt.FUNCTION_WORDS_SRC) | frozenset(tt.FUNCTION_WORDS_TGT)
    )
    values = []
    for overlap in (1.0, 0.75, 0.5, 0.25, 0.0):
        a, b = tt.gen_synthetic_domains(overlap, 40, 60, 512, seed=222)
        da = dv.build_distribution(tp.prep_for_divergence(a.target_texts(), prep))
        db = dv.build_distribution(tp.prep_for_divergence(b.target_texts(), prep))
        values.append(dv.js_divergence(da, db))
    assert all(b > a for a, b in zip(values, values[1:]))
    assert values[0] < 0.05
    assert values[-1] > 0.8
    _pass(
        "divergence-overlap monotonicity",
        "JSD " + " < ".join(f"{v:.3f}" for v in values),
    )


def test_correlation_suite(desk_grid):
    xs = [1.0, 2.0, 3.0, 4.0, 5.0]
    exact = metrics.pearson(xs, [2 * x + 1 for x in xs])
    assert exact.r_squared == 1.0

    hand = metrics.pearson([1, 2, 3], [2, 1, 4])
    assert hand.r_squared == pytest.approx(3 / 7, abs=1e-9)

    base = metrics.pearson([1, 2, 4, 7], [3, 5, 4, 9])
    affine = metrics.pearson([3 * x + 11 for x in [1, 2, 4, 7]], [3, 5, 4, 9])
    assert affine.pearson_r == pytest.approx(base.pearson_r, abs=1e-12)
    neg = metrics.pearson([-2 * x for x in [1, 2, 4, 7]], [3, 5, 4, 9])
    assert neg.pearson_r == pytest.approx(-base.pearson_r, abs=1e-12)

    with pytest.raises(MetricsError, match="undefined"):
        metrics.pearson([1, 2, 3], [4, 4, 4])

    records = desk_grid["records"]
    matrix = desk_grid["matrix"]
    large = [
        r for r in records
        if (r.intermediate_size or 0) == GRID_TRAIN_PAIRS and r.final_size == GRID_TRAIN_PAIRS
    ]
    final_rep = metrics.correlate_divergence(large, matrix, "final")
    inter_rep = metrics.correlate_divergence(large, matrix, "intermediate")
    assert final_rep.r_squared > inter_rep.r_squared
    _pass(
        "correlation suite",
        f"large-size r2: final {final_rep.r_squared:.3f} > intermediate {inter_rep.r_squared:.3f}",
    )


# ---------------------------------------------------------------------------
# determinism & persistence
# ---------------------------------------------------------------------------

def test_replay_determinism(desk_grid):
    records = desk_grid["records"]
    plans = desk_grid["plans"]
    target = next(
        p for p in plans
        if p.seed == GRID_SEEDS[0] and p.intermediate is not None
        and p.final.size == GRID_TEST_PAIRS
    )
    original = next(r for r in records if r.plan_id == target.plan_id)
    replay = orch.run_plan(target, desk_grid["backend"], desk_grid["store"])
    assert replay.score_values() == original.score_values()
    assert replay.stage_digests == original.stage_digests
    _pass("replay determinism", f"plan {target.plan_id} reproduced exactly")


def test_kill_during_run_leaves_no_partial_record(tmp_path):
    records_dir = tmp_path / "records"
    assets_dir = tmp_path / "assets"
    proc = subprocess.Popen(
        [sys.executable, "-m", "itftlab.cli", "run", "--demo",
         "--records", str(records_dir), "--demo-dir", str(assets_dir)],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    try:
        deadline = time.monotonic() + 300
        while time.monotonic() < deadline:
            if len(list(records_dir.glob("*.json"))) >= 1:
                break
            if proc.poll() is not None:
                break
            time.sleep(0.05)
        time.sleep(0.2)  # land somewhere inside the next cell
    finally:
        if proc.poll() is None:
            proc.send_signal(signal.SIGKILL)
            proc.wait()
    found = sorted(records_dir.glob("*.json"))
    assert found, "expected at least one record before the kill"
    for path in found:
        record = orch.load_record(path)  # parse must succeed
        assert record.status in ("ok", "failed")
        assert record.finished
    _pass(
        "kill mid-run",
        f"{len(found)} records on disk, every one complete and parsable",
    )


def test_demo_completes_end_to_end(tmp_path):
    records_dir = tmp_path / "records"
    result = subprocess.run(
        [sys.executable, "-m", "itftlab.cli", "run", "--demo",
         "--records", str(records_dir), "--demo-dir", str(tmp_path / "assets")],
        capture_output=True,
        text=True,
        timeout=900,
    )
    assert result.returncode == 0, result.stderr
    records = orch.load_records(records_dir)
    assert len(records) == 4
    assert all(r.status == "ok" for r in records)
    _pass("run --demo end to end", f"{len(records)} grid cells recorded")
