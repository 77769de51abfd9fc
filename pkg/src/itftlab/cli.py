"""Command-line surface.

Subcommands: ingest, align, sample, subword, divergence, bleu, spbleu, run,
report.  Exit codes: 0 success, 1 experiment-level failure (some grid cells
failed), 2 usage or input error.  With --json, results go to stdout and
errors to stderr as JSON objects.  All randomness flows from --seed
(default 222); the record store root comes from $ITFT_LAB_HOME when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import divergence as div_mod
from . import metrics as metrics_mod
from . import orchestrator as orch_mod
from . import textprep as tp_mod
from . import toytrainer as tt_mod
from .errors import ItftLabError

log = logging.getLogger("itftlab")

DEFAULT_SEED = 222


def _home() -> Path:
    return Path(os.environ.get("ITFT_LAB_HOME", "itft_lab_home"))


def _emit(args, payload: dict, text: str):
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    else:
        print(text)


def _fail(args, message: str, code: int = 2):
    if getattr(args, "json", False):
        print(json.dumps({"error": message}), file=sys.stderr)
    else:
        print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


# ---------------------------------------------------------------------------
# corpus management
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    corpus = corpus_mod.ingest_line_aligned(
        args.src,
        args.tgt,
        corpus_id=args.id,
        source_lang=args.src_lang,
        target_lang=args.tgt_lang,
        domain=args.domain,
        provenance=args.provenance,
    )
    corpus_mod.save_corpus(corpus, args.out)
    _emit(args, corpus.meta(), f"ingested {len(corpus)} pairs -> {args.out}.*")


def cmd_align(args):
    book_map = None
    if args.book_map:
        book_map = json.loads(Path(args.book_map).read_text(encoding="utf-8"))
    a = corpus_mod.read_verse_tsv(args.a, args.a_lang, book_map)
    b = corpus_mod.read_verse_tsv(args.b, args.b_lang, book_map)
    corpus = corpus_mod.align_verses(
        a, b, corpus_id=args.id, domain=args.domain, provenance=args.provenance
    )
    corpus_mod.save_corpus(corpus, args.out)
    only_a = len(a.entries) - len(corpus)
    only_b = len(b.entries) - len(corpus)
    payload = corpus.meta() | {"unmatched_a": only_a, "unmatched_b": only_b}
    _emit(
        args,
        payload,
        f"aligned {len(corpus)} verse pairs ({only_a}/{only_b} unmatched) -> {args.out}.*",
    )


def cmd_sample(args):
    corpus = corpus_mod.load_corpus(args.corpus)
    subset = corpus_mod.sample_subset(corpus, corpus_mod.SampleSpec(size=args.n, seed=args.seed))
    corpus_mod.save_corpus(subset, args.out)
    _emit(args, subset.meta(), f"sampled {len(subset)}/{len(corpus)} pairs -> {args.out}.*")


def cmd_subword(args):
    pool: list[str] = []
    for path in args.input:
        pool.extend(Path(path).read_text(encoding="utf-8").splitlines())
    model = tp_mod.train_subword(pool, args.vocab_size)
    tp_mod.save_subword(model, args.out)
    payload = {
        "model_id": model.model_id,
        "vocab_size": model.vocab_size,
        "base_vocab": len(model.base_vocab),
        "merges": len(model.merges),
    }
    _emit(
        args,
        payload,
        f"trained subword model {model.model_id}: vocab {model.vocab_size} "
        f"({len(model.merges)} merges) -> {args.out}",
    )


# ---------------------------------------------------------------------------
# divergence
# ---------------------------------------------------------------------------

def _load_spec_corpora(specs: list[str], what: str) -> list[corpus_mod.ParallelCorpus]:
    """Each spec is label=path; path is a saved corpus prefix or a plain text
    file (then both sides are that file's text under one pseudo-language)."""
    out = []
    for spec in specs:
        if "=" not in spec:
            raise ItftLabError(f"bad {what} spec {spec!r}, expected label=path")
        label, path = spec.split("=", 1)
        if Path(f"{path}.json").exists():
            corpus = corpus_mod.load_corpus(path)
            corpus = corpus_mod.ParallelCorpus(
                id=corpus.id,
                source_lang=corpus.source_lang,
                target_lang=corpus.target_lang,
                domain=label,
                pairs=corpus.pairs,
                provenance=corpus.provenance,
            )
        elif Path(path).exists():
            lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
            if not lines:
                raise ItftLabError(f"{what} file {path} is empty")
            corpus = corpus_mod.ParallelCorpus(
                id=label,
                source_lang="doc",
                target_lang="txt",
                domain=label,
                pairs=tuple((line, line) for line in lines),
                provenance=f"plain text {path}",
            )
        else:
            raise ItftLabError(f"{what} path not found: {path}")
        out.append(corpus)
    return out


def cmd_divergence(args):
    stopwords: frozenset[str] = frozenset()
    if args.stopwords:
        stopwords = tp_mod.load_stopwords(args.stopwords)
    cfg = tp_mod.DivergencePrepConfig(
        stopwords=stopwords,
        lowercase=not args.no_lowercase,
        keep_punctuation=not args.drop_punctuation,
    )
    train = _load_spec_corpora(args.train, "train")
    test = _load_spec_corpora(args.test, "test")
    matrix = div_mod.matrix_from_corpora(
        train,
        test,
        cfg,
        sides=args.sides,
        train_size=args.train_size,
        test_size=args.test_size,
        seed=args.seed,
    )
    if args.out_prefix:
        Path(f"{args.out_prefix}.csv").write_text(matrix.to_csv(), encoding="utf-8")
        Path(f"{args.out_prefix}.json").write_text(matrix.to_json() + "\n", encoding="utf-8")
    if args.json:
        print(matrix.to_json())
    else:
        print(matrix.render())


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _read_aligned(hyp_path, ref_path) -> tuple[list[str], list[str]]:
    hyp = Path(hyp_path).read_text(encoding="utf-8").splitlines()
    ref = Path(ref_path).read_text(encoding="utf-8").splitlines()
    while hyp and not hyp[-1].strip():
        hyp.pop()
    while ref and not ref[-1].strip():
        ref.pop()
    if len(hyp) != len(ref):
        raise ItftLabError(f"line count mismatch: {len(hyp)} hypotheses vs {len(ref)} references")
    return hyp, ref


def cmd_bleu(args):
    hyp, ref = _read_aligned(args.hyp, args.ref)
    result = metrics_mod.bleu([h.split() for h in hyp], [r.split() for r in ref])
    _emit(args, result.to_dict(), str(result))


def cmd_spbleu(args):
    model = tp_mod.load_subword(args.spm)
    hyp, ref = _read_aligned(args.hyp, args.ref)
    result = metrics_mod.sp_bleu(model, hyp, ref)
    _emit(args, result.to_dict(), str(result))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _load_store(corpora_dir) -> dict[str, corpus_mod.ParallelCorpus]:
    store = {}
    for sidecar in sorted(Path(corpora_dir).glob("*.json")):
        prefix = str(sidecar)[: -len(".json")]
        corpus = corpus_mod.load_corpus(prefix)
        store[corpus.id] = corpus
    if not store:
        raise ItftLabError(f"no corpora found under {corpora_dir}")
    return store


def _sizes(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise ItftLabError(f"bad size list {text!r}") from None


DEMO_SIZES = {"intermediate": [0, 256], "final": [64, 256]}


def _demo_assets(out_dir: Path, seed: int):
    """Self-contained synthetic grid: corpora, subword model, backend."""
    lex = 40
    train = tt_mod.synthetic_domain_family(
        [0, lex // 2],
        lexicon_size=lex,
        grammar_size=30,
        n_pairs=512,
        seed=seed,
        names=["demoA", "demoB"],
    )
    tests = tt_mod.synthetic_domain_family(
        [lex // 2, lex],
        lexicon_size=lex,
        grammar_size=30,
        n_pairs=48,
        seed=seed + 1000,
        grammar_seed=seed,
        names=["demoB-test", "demoC-test"],
    )
    store = {c.id: c for c in train + tests}
    corpora_dir = out_dir / "corpora"
    for c in store.values():
        corpus_mod.save_corpus(c, corpora_dir / c.id)
    pool = []
    for c in train:
        pool.extend(c.source_texts())
        pool.extend(c.target_texts())
    spm = tp_mod.train_subword(pool, vocab_size=200)
    tp_mod.save_subword(spm, out_dir / "subword.json")
    backend = orch_mod.ToyBackend(
        spm, max_decode_len=24, d_model=32, ffn_dim=64, max_len=48
    )
    plans = orch_mod.plan_grid(
        store,
        intermediate_corpus="demoA",
        intermediate_sizes=DEMO_SIZES["intermediate"],
        final_corpus="demoB",
        final_sizes=DEMO_SIZES["final"],
        tests=[("demoB-test", "in-domain"), ("demoC-test", "out-domain")],
        seeds=[seed],
        train=tt_mod.TrainConfig(epochs=2, lr=1e-3, seed=seed),
        notes="bundled synthetic demo grid",
    )
    return plans, backend, store


def cmd_run(args):
    records_dir = Path(args.records) if args.records else _home() / "records"
    if args.demo:
        out_dir = records_dir.parent if records_dir.name == "records" else records_dir
        plans, backend, store = _demo_assets(Path(args.demo_dir or out_dir), args.seed)
    elif args.plan:
        plans = [orch_mod.load_plan(args.plan)]
        backend, store = _backend_from_args(args)
    else:
        if not (args.corpora and args.final):
            _fail(args, "run needs --demo, --plan, or --corpora with grid flags")
        backend, store = _backend_from_args(args)
        plans = orch_mod.plan_grid(
            store,
            intermediate_corpus=args.intermediate,
            intermediate_sizes=_sizes(args.intermediate_sizes),
            final_corpus=args.final,
            final_sizes=_sizes(args.final_sizes),
            tests=[t for t in args.tests.split(",") if t],
            seeds=_sizes(args.seeds) or [args.seed],
            train=tt_mod.TrainConfig(
                epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed
            ),
        )
    records = orch_mod.run_grid(
        plans,
        backend,
        store,
        records_dir=records_dir,
        force=args.force,
        jobs=args.jobs,
    )
    failed = [r for r in records if r.status != "ok"]
    payload = {
        "records_dir": str(records_dir),
        "n_plans": len(plans),
        "ok": len(records) - len(failed),
        "failed": [{"plan_id": r.plan_id, "error": r.error} for r in failed],
    }
    lines = [f"{r.plan_id}  {r.status}  int={r.intermediate_size or 0} fin={r.final_size} "
             f"seed={r.seed}" for r in records]
    _emit(args, payload, "\n".join(lines + [f"records -> {records_dir}"]))
    if failed:
        raise SystemExit(1)


def _backend_from_args(args):
    if not args.spm:
        _fail(args, "a subword model file is required (--spm)")
    spm = tp_mod.load_subword(args.spm)
    backend = orch_mod.ToyBackend(
        spm,
        bidirectional=not args.unidirectional,
        max_decode_len=args.max_decode_len,
        d_model=args.d_model,
        heads=args.heads,
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim,
        dropout=args.dropout,
        max_len=args.max_len,
    )
    store = _load_store(args.corpora)
    return backend, store


def cmd_report(args):
    records_dir = Path(args.records) if args.records else _home() / "records"
    records = orch_mod.load_records(records_dir)
    if not records:
        _fail(args, f"no records under {records_dir}")
    group_by = [g for g in args.group.split(",") if g]
    table = orch_mod.aggregate(records, group_by)
    piv = orch_mod.pivot(records, in_domain=None if args.all_tests else False)
    if args.out:
        Path(args.out).write_text(orch_mod.long_csv(records), encoding="utf-8")
    if args.format == "json":
        print(json.dumps({"groups": table, "pivot": piv}, indent=2))
    elif args.format == "csv":
        print(orch_mod.long_csv(records), end="")
    else:
        print("mean spBLEU by " + ", ".join(group_by))
        for row in table:
            key = " ".join(f"{g}={row[g]}" for g in group_by)
            print(f"  {key}: {row['mean_spbleu']:.1f} (n={row['n']})")
        print()
        print(orch_mod.pivot_markdown(piv))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itftlab",
        description="Domain divergence, subword BLEU and two-stage fine-tuning grids at desk scale.",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="global seed")
    parser.add_argument("--config", help="JSON file with flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest two line-aligned files")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--provenance", default="")
    p.add_argument("--out", required=True, help="output corpus prefix")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("align", help="align two verse-keyed TSV files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--a-lang", required=True)
    p.add_argument("--b-lang", required=True)
    p.add_argument("--book-map", help="JSON file mapping localized book names to codes")
    p.add_argument("--id", default=None)
    p.add_argument("--domain", default="bible")
    p.add_argument("--provenance", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("sample", help="deterministic nested subsample")
    p.add_argument("--corpus", required=True, help="corpus prefix")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("subword", help="train a subword model")
    p.add_argument("--input", nargs="+", required=True, help="text files")
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subword)

    p = sub.add_parser("divergence", help="JSD matrix between labeled domains")
    p.add_argument("--train", nargs="+", required=True, metavar="LABEL=PATH")
    p.add_argument("--test", nargs="+", required=True, metavar="LABEL=PATH")
    p.add_argument("--stopwords", help="stopword file, one token per line")
    p.add_argument("--no-lowercase", action="store_true")
    p.add_argument("--drop-punctuation", action="store_true")
    p.add_argument("--sides", choices=("both", "source", "target"), default="both")
    p.add_argument("--train-size", type=int, default=div_mod.DEFAULT_TRAIN_CELL_SIZE)
    p.add_argument("--test-size", type=int, default=div_mod.DEFAULT_TEST_CELL_SIZE)
    p.add_argument("--out-prefix", help="write <prefix>.csv and <prefix>.json")
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("bleu", help="corpus BLEU over whitespace tokens")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_bleu)

    p = sub.add_parser("spbleu", help="corpus BLEU over subword symbols")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--spm", required=True, help="subword model file")
    p.set_defaults(func=cmd_spbleu)

    p = sub.add_parser("run", help="execute an experiment plan or grid")
    p.add_argument("--plan", help="plan JSON file")
    p.add_argument("--demo", action="store_true", help="bundled synthetic desk grid")
    p.add_argument("--demo-dir", help="where the demo writes its assets")
    p.add_argument("--corpora", help="directory of saved corpora")
    p.add_argument("--intermediate", help="intermediate-task corpus id")
    p.add_argument(
        "--intermediate-sizes",
        default=",".join(map(str, orch_mod.DESK_INTERMEDIATE_SIZES)),
        help="comma list; 0 = baseline (no intermediate stage)",
    )
    p.add_argument("--final", help="final-task corpus id")
    p.add_argument(
        "--final-sizes",
        default=",".join(map(str, orch_mod.DESK_FINAL_SIZES)),
    )
    p.add_argument("--tests", default="", help="comma-separated test corpus ids")
    p.add_argument("--seeds", default="")
    p.add_argument("--records", help="record store directory (default $ITFT_LAB_HOME/records)")
    p.add_argument("--force", action="store_true", help="rerun already-recorded plans")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--spm", help="subword model file for the toy backend")
    p.add_argument("--unidirectional", action="store_true")
    p.add_argument("--max-decode-len", type=int, default=48)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=200)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate records into tables")
    p.add_argument("--records", help="record store directory")
    p.add_argument("--group", default="intermediate_size,final_size")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--format", choices=("csv", "json", "md"), default="md")
    p.add_argument("--all-tests", action="store_true", help="include in-domain tests in the pivot")
    p.add_argument("--out", help="also write the long-form CSV here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            _fail(args, f"bad config file: {exc}")
        parser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    try:
        args.func(args)
    except ItftLabError as exc:
        _fail(args, str(exc))
    except FileNotFoundError as exc:
        _fail(args, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
