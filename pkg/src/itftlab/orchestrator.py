"""Two-stage fine-tuning experiment grids: plan, execute, persist, aggregate.

A plan is one grid cell: an optional intermediate stage (absent = baseline),
a mandatory final stage, and a set of test corpora scored with subword BLEU
in both directions.  Records are one JSON file per plan id in a record-store
directory, written atomically (temp file + rename), so a killed run never
leaves a parsable partial record and reruns are skipped unless forced.

Stage checkpoints are cached by their stage-chain digest, so one intermediate
checkpoint is shared by every final-task size that extends it.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import ParallelCorpus, SampleSpec, sample_subset
from .errors import OrchestratorError
from .metrics import VERSION, sp_bleu
from .textprep import EOS_ID, SubwordModel, decode as spm_decode, encode as spm_encode
from .toytrainer import (
    ModelCheckpoint,
    ModelConfig,
    TrainConfig,
    fine_tune,
    greedy_decode_batch,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

# grid-size defaults: the full-scale sizes, and desk-scale synthetic sizes
# chosen to preserve their ratios
FULL_FINAL_SIZES = (1_000, 10_000, 25_000, 50_000)
FULL_INTERMEDIATE_SIZES = (0, 1_000, 25_000)
DESK_FINAL_SIZES = (64, 256, 1024, 2048)
DESK_INTERMEDIATE_SIZES = (0, 256, 2048)


@dataclass(frozen=True)
class StageSpec:
    corpus_id: str
    size: int
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"corpus_id": self.corpus_id, "size": self.size, "train": self.train.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "StageSpec":
        return StageSpec(d["corpus_id"], int(d["size"]), TrainConfig(**d["train"]))


@dataclass(frozen=True)
class TestSpec:
    corpus_id: str
    label: str
    in_domain: bool

    def to_dict(self) -> dict:
        return {"corpus_id": self.corpus_id, "label": self.label, "in_domain": self.in_domain}

    @staticmethod
    def from_dict(d: dict) -> "TestSpec":
        return TestSpec(d["corpus_id"], d["label"], bool(d["in_domain"]))


@dataclass(frozen=True)
class ExperimentPlan:
    base: dict
    intermediate: StageSpec | None
    final: StageSpec
    tests: tuple[TestSpec, ...]
    seed: int
    notes: str = ""

    def __post_init__(self):
        labels = [t.label for t in self.tests]
        if len(labels) != len(set(labels)):
            raise OrchestratorError(f"duplicate test labels: {labels}")
        if not self.tests:
            raise OrchestratorError("plan needs at least one test set")

    @property
    def plan_id(self) -> str:
        payload = json.dumps(self._content(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def _content(self) -> dict:
        return {
            "base": self.base,
            "intermediate": self.intermediate.to_dict() if self.intermediate else None,
            "final": self.final.to_dict(),
            "tests": [t.to_dict() for t in self.tests],
            "seed": self.seed,
            "notes": self.notes,
        }

    def to_dict(self) -> dict:
        d = self._content()
        d["plan_id"] = self.plan_id
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentPlan":
        return ExperimentPlan(
            base=d.get("base", {"init": {}}),
            intermediate=StageSpec.from_dict(d["intermediate"]) if d.get("intermediate") else None,
            final=StageSpec.from_dict(d["final"]),
            tests=tuple(TestSpec.from_dict(t) for t in d["tests"]),
            seed=int(d["seed"]),
            notes=d.get("notes", ""),
        )


@dataclass
class RunRecord:
    plan_id: str
    plan: dict
    status: str
    started: str
    finished: str
    seed: int
    intermediate_domain: str | None
    intermediate_size: int | None
    final_domain: str | None
    final_size: int | None
    scores: list[dict]
    stage_digests: dict
    cache_hits: list[str]
    backend: str
    version: str = VERSION
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "RunRecord":
        return RunRecord(**d)

    def score_values(self) -> list[float]:
        return [entry["score"] for entry in self.scores]


# ---------------------------------------------------------------------------
# trainer backends
# ---------------------------------------------------------------------------

class TrainerBackend:
    """Contract every trainer backend satisfies.

    init(seed) -> checkpoint; fine_tune(ckpt, corpus, cfg, stage) -> ckpt;
    translate(ckpt, texts, direction) -> texts; save/load round-trip a
    checkpoint; `spm` is the subword model used for scoring; `signature()`
    feeds the stage-cache keys.
    """

    name = "abstract"
    spm: SubwordModel

    def init(self, seed: int) -> ModelCheckpoint:
        raise NotImplementedError

    def fine_tune(self, ckpt, corpus: ParallelCorpus, cfg: TrainConfig, stage: str):
        raise NotImplementedError

    def translate(self, ckpt, texts: Sequence[str], direction: str) -> list[str]:
        raise NotImplementedError

    def directions(self) -> tuple[str, ...]:
        return ("fwd",)

    def signature(self) -> dict:
        return {"name": self.name}

    def save(self, ckpt, path) -> None:
        raise NotImplementedError

    def load(self, path):
        raise NotImplementedError


class ToyBackend(TrainerBackend):
    """The built-in from-scratch encoder-decoder.

    Trains one joint model for both translation directions by prepending a
    direction tag to the source sequence (two extra vocabulary ids beyond the
    subword model), so every record carries xx->yy and yy->xx scores.
    """

    name = "toy"

    def __init__(
        self,
        spm: SubwordModel,
        *,
        bidirectional: bool = True,
        max_decode_len: int = 48,
        d_model: int = 64,
        heads: int = 2,
        enc_layers: int = 2,
        dec_layers: int = 2,
        ffn_dim: int = 128,
        dropout: float = 0.1,
        max_len: int = 200,
    ):
        self.spm = spm
        self.bidirectional = bidirectional
        self.max_decode_len = max_decode_len
        self.tag_fwd = spm.vocab_size
        self.tag_rev = spm.vocab_size + 1
        self.model_cfg = ModelConfig(
            vocab_size=spm.vocab_size + (2 if bidirectional else 0),
            d_model=d_model,
            heads=heads,
            enc_layers=enc_layers,
            dec_layers=dec_layers,
            ffn_dim=ffn_dim,
            dropout=dropout,
            max_len=max_len,
            vocab_id=spm.model_id,
        )

    def init(self, seed: int) -> ModelCheckpoint:
        return init_model(self.model_cfg, seed)

    def _src_ids(self, text: str, direction: str) -> list[int]:
        ids = spm_encode(self.spm, text) + [EOS_ID]
        if self.bidirectional:
            tag = self.tag_fwd if direction == "fwd" else self.tag_rev
            ids = [tag] + ids
        return ids

    def _pair_encoder(self):
        def enc(src_text: str, tgt_text: str):
            examples = [(self._src_ids(src_text, "fwd"), spm_encode(self.spm, tgt_text))]
            if self.bidirectional:
                examples.append((self._src_ids(tgt_text, "rev"), spm_encode(self.spm, src_text)))
            return examples

        return enc

    def fine_tune(self, ckpt, corpus, cfg, stage):
        return fine_tune(ckpt, corpus, cfg, self._pair_encoder(), stage=stage)

    def translate(self, ckpt, texts, direction="fwd"):
        if direction not in self.directions():
            raise OrchestratorError(f"backend {self.name} cannot translate direction {direction!r}")
        batch = [self._src_ids(t, direction) for t in texts]
        out = greedy_decode_batch(ckpt, batch, self.max_decode_len)
        return [
            spm_decode(self.spm, [i for i in ids if i < self.spm.vocab_size]) for ids in out
        ]

    def directions(self):
        return ("fwd", "rev") if self.bidirectional else ("fwd",)

    def signature(self) -> dict:
        return {
            "name": self.name,
            "spm": self.spm.model_id,
            "model": self.model_cfg.to_dict(),
            "bidirectional": self.bidirectional,
        }

    def save(self, ckpt, path):
        save_checkpoint(ckpt, path)

    def load(self, path):
        return load_checkpoint(path)


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def plan_grid(
    store: Mapping[str, ParallelCorpus],
    *,
    intermediate_corpus: str | None,
    intermediate_sizes: Sequence[int],
    final_corpus: str,
    final_sizes: Sequence[int],
    tests: Sequence[str | tuple[str, str]],
    seeds: Sequence[int],
    train: TrainConfig = TrainConfig(),
    notes: str = "",
) -> list[ExperimentPlan]:
    """Cartesian grid of plans; intermediate size 0 encodes the baseline.

    ``tests`` entries are corpus ids or (corpus id, label) pairs; the
    in-domain flag is derived by comparing test and final-task domains.
    """
    final_domain = _resolve(store, final_corpus).domain
    test_specs = []
    for t in tests:
        corpus_id, label = (t, t) if isinstance(t, str) else t
        test_specs.append(
            TestSpec(corpus_id, label, _resolve(store, corpus_id).domain == final_domain)
        )
    plans = []
    for seed in seeds:
        cfg = replace(train, seed=int(seed))
        for isize in intermediate_sizes:
            _check_size(store, intermediate_corpus, isize)
            intermediate = None
            if isize:
                if intermediate_corpus is None:
                    raise OrchestratorError("intermediate size given without a corpus")
                intermediate = StageSpec(intermediate_corpus, int(isize), cfg)
            for fsize in final_sizes:
                if not fsize:
                    raise OrchestratorError("final stage is mandatory; size 0 not allowed")
                _check_size(store, final_corpus, fsize)
                plans.append(
                    ExperimentPlan(
                        base={"init": {"seed": int(seed)}},
                        intermediate=intermediate,
                        final=StageSpec(final_corpus, int(fsize), cfg),
                        tests=tuple(test_specs),
                        seed=int(seed),
                        notes=notes,
                    )
                )
    return plans


def _resolve(store: Mapping[str, ParallelCorpus], corpus_id: str) -> ParallelCorpus:
    try:
        return store[corpus_id]
    except KeyError:
        raise OrchestratorError(f"unknown corpus id {corpus_id!r}") from None


def _check_size(store, corpus_id, size):
    if not size:
        return
    corpus = _resolve(store, corpus_id)
    if size > len(corpus):
        raise OrchestratorError(
            f"stage size {size} exceeds corpus {corpus_id!r} ({len(corpus)} pairs)"
        )


def save_plan(plan: ExperimentPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_plan(path: str | Path) -> ExperimentPlan:
    return ExperimentPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

class StageCache:
    """Checkpoint cache keyed by the digest of the stage chain so far."""

    def __init__(self):
        self._data: dict[str, object] = {}
        self._lock = threading.Lock()

    def get(self, key: str):
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, ckpt) -> None:
        with self._lock:
            self._data[key] = ckpt


def _stage_key(backend_sig: dict, chain: list) -> str:
    payload = json.dumps({"backend": backend_sig, "chain": chain}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def record_path(records_dir: str | Path, plan_id: str) -> Path:
    return Path(records_dir) / f"{plan_id}.json"


def write_record(record: RunRecord, records_dir: str | Path) -> Path:
    """Atomic write: temp file in the same directory, then rename."""
    records_dir = Path(records_dir)
    records_dir.mkdir(parents=True, exist_ok=True)
    path = record_path(records_dir, record.plan_id)
    tmp = records_dir / f".{record.plan_id}.{os.getpid()}.tmp"
    tmp.write_text(json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_record(path: str | Path) -> RunRecord:
    return RunRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_records(records_dir: str | Path) -> list[RunRecord]:
    records = []
    for path in sorted(Path(records_dir).glob("*.json")):
        records.append(load_record(path))
    return records


def run_plan(
    plan: ExperimentPlan,
    backend: TrainerBackend,
    store: Mapping[str, ParallelCorpus],
    *,
    records_dir: str | Path | None = None,
    force: bool = False,
    cache: StageCache | None = None,
) -> RunRecord:
    """Execute one plan: base -> (intermediate?) -> final -> evaluate.

    An existing persisted record is returned as-is unless ``force``.  Any
    stage failure yields a persisted failed record with the error context and
    no scores.
    """
    if records_dir is not None and not force:
        existing = record_path(records_dir, plan.plan_id)
        if existing.exists():
            log.info("plan %s already recorded, skipping (use force to rerun)", plan.plan_id)
            return load_record(existing)

    cache = cache if cache is not None else StageCache()
    started = _now()
    sig = backend.signature()
    record = RunRecord(
        plan_id=plan.plan_id,
        plan=plan.to_dict(),
        status="ok",
        started=started,
        finished="",
        seed=plan.seed,
        intermediate_domain=None,
        intermediate_size=plan.intermediate.size if plan.intermediate else None,
        final_domain=None,
        final_size=plan.final.size,
        scores=[],
        stage_digests={},
        cache_hits=[],
        backend=sig.get("name", "?"),
    )
    try:
        if "checkpoint" in plan.base:
            ckpt_path = plan.base["checkpoint"]
            file_digest = hashlib.sha256(Path(ckpt_path).read_bytes()).hexdigest()[:16]
            chain: list = [["checkpoint", file_digest]]
            key = _stage_key(sig, chain)
            ckpt = cache.get(key)
            if ckpt is None:
                ckpt = backend.load(ckpt_path)
                cache.put(key, ckpt)
            else:
                record.cache_hits.append("base")
        else:
            init_seed = int(plan.base.get("init", {}).get("seed", plan.seed))
            chain = [["init", init_seed]]
            key = _stage_key(sig, chain)
            ckpt = cache.get(key)
            if ckpt is None:
                ckpt = backend.init(init_seed)
                cache.put(key, ckpt)
            else:
                record.cache_hits.append("init")
        record.stage_digests["base"] = key

        for stage_name, stage in (("intermediate", plan.intermediate), ("final", plan.final)):
            if stage is None:
                continue
            corpus = _resolve(store, stage.corpus_id)
            if stage_name == "intermediate":
                record.intermediate_domain = corpus.domain
            else:
                record.final_domain = corpus.domain
            chain = chain + [[stage_name, stage.corpus_id, stage.size, stage.train.to_dict()]]
            key = _stage_key(sig, chain)
            cached = cache.get(key)
            if cached is not None:
                ckpt = cached
                record.cache_hits.append(stage_name)
            else:
                sampled = sample_subset(corpus, SampleSpec(size=stage.size, seed=plan.seed))
                ckpt = backend.fine_tune(ckpt, sampled, stage.train, stage_name)
                cache.put(key, ckpt)
            record.stage_digests[stage_name] = key

        for test in plan.tests:
            corpus = _resolve(store, test.corpus_id)
            for direction in backend.directions():
                if direction == "fwd":
                    inputs = corpus.source_texts()
                    refs = corpus.target_texts()
                    label = f"{corpus.source_lang}->{corpus.target_lang}"
                else:
                    inputs = corpus.target_texts()
                    refs = corpus.source_texts()
                    label = f"{corpus.target_lang}->{corpus.source_lang}"
                hyps = backend.translate(ckpt, inputs, direction)
                result = sp_bleu(backend.spm, hyps, refs)
                record.scores.append(
                    {
                        "test_label": test.label,
                        "test_domain": corpus.domain,
                        "in_domain": test.in_domain,
                        "direction": label,
                        "score": result.score,
                        "bleu": result.to_dict(),
                    }
                )
    except Exception as exc:  # failed record keeps the error context
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        record.scores = []
        log.warning("plan %s failed: %s", plan.plan_id, record.error)

    record.finished = _now()
    if records_dir is not None:
        write_record(record, records_dir)
    return record


def run_grid(
    plans: Sequence[ExperimentPlan],
    backend: TrainerBackend,
    store: Mapping[str, ParallelCorpus],
    *,
    records_dir: str | Path | None = None,
    force: bool = False,
    jobs: int = 1,
) -> list[RunRecord]:
    """Run every plan; cells are independent, so order (and parallelism)
    cannot change the resulting records."""
    cache = StageCache()
    if jobs <= 1:
        return [
            run_plan(p, backend, store, records_dir=records_dir, force=force, cache=cache)
            for p in plans
        ]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(
                run_plan, p, backend, store, records_dir=records_dir, force=force, cache=cache
            )
            for p in plans
        ]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

LONG_COLUMNS = ("intermediate_size", "final_size", "seed", "test", "direction", "spbleu")


def records_long(records: Iterable[RunRecord]) -> list[dict]:
    """One row per (record, test, direction) score."""
    rows = []
    for record in records:
        if record.status != "ok":
            continue
        for entry in record.scores:
            rows.append(
                {
                    "intermediate_size": record.intermediate_size or 0,
                    "final_size": record.final_size,
                    "seed": record.seed,
                    "test": entry["test_label"],
                    "direction": entry["direction"],
                    "spbleu": entry["score"],
                    "in_domain": entry["in_domain"],
                }
            )
    return rows


def aggregate(records: Iterable[RunRecord], group_by: Sequence[str]) -> list[dict]:
    """Mean spBLEU per group plus the per-sample values."""
    valid = {"intermediate_size", "final_size", "seed", "test", "direction", "in_domain"}
    for g in group_by:
        if g not in valid:
            raise OrchestratorError(f"cannot group by {g!r}; choose from {sorted(valid)}")
    rows = records_long(records)
    if not rows:
        raise OrchestratorError("no scores to aggregate")
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = tuple(row[g] for g in group_by)
        groups.setdefault(key, []).append(row["spbleu"])
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        values = groups[key]
        entry = dict(zip(group_by, key))
        entry["n"] = len(values)
        entry["mean_spbleu"] = sum(values) / len(values)
        entry["values"] = values
        out.append(entry)
    return out


def long_csv(records: Iterable[RunRecord]) -> str:
    lines = [",".join(LONG_COLUMNS)]
    for row in records_long(records):
        lines.append(
            ",".join(str(row[c]) if c != "spbleu" else repr(row[c]) for c in LONG_COLUMNS)
        )
    return "\n".join(lines) + "\n"


def pivot(
    records: Iterable[RunRecord],
    *,
    test: str | None = None,
    direction: str | None = None,
    in_domain: bool | None = None,
) -> dict:
    """Mean spBLEU with final sizes as rows and intermediate sizes as columns."""
    rows = records_long(records)
    if test is not None:
        rows = [r for r in rows if r["test"] == test]
    if direction is not None:
        rows = [r for r in rows if r["direction"] == direction]
    if in_domain is not None:
        rows = [r for r in rows if r["in_domain"] == in_domain]
    cells: dict[tuple[int, int], list[float]] = {}
    for r in rows:
        cells.setdefault((r["final_size"], r["intermediate_size"]), []).append(r["spbleu"])
    fsizes = sorted({k[0] for k in cells})
    isizes = sorted({k[1] for k in cells})
    table = {
        "final_sizes": fsizes,
        "intermediate_sizes": isizes,
        "values": {
            f: {i: (sum(v) / len(v) if (v := cells.get((f, i))) else None) for i in isizes}
            for f in fsizes
        },
    }
    return table


def pivot_markdown(table: dict, digits: int = 1) -> str:
    isizes = table["intermediate_sizes"]
    head = "| final \\ intermediate | " + " | ".join(str(i) for i in isizes) + " |"
    sep = "|" + "---|" * (len(isizes) + 1)
    lines = [head, sep]
    for f in table["final_sizes"]:
        cells = []
        for i in isizes:
            v = table["values"][f][i]
            cells.append("-" if v is None else f"{v:.{digits}f}")
        lines.append(f"| {f} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
