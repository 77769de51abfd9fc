"""Parallel corpus ingestion, verse alignment, labeling and deterministic sampling.

File formats:
  * line-aligned: two UTF-8 text files, one sentence per line, paired by line number
  * verse-keyed:  UTF-8 TSV, ``book:chapter:verse<TAB>text``
  * sidecar:      ``<prefix>.json`` with id, langs, domain, provenance, counts

All operations are pure; corpora are immutable after construction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import AlignmentError, CorpusError

log = logging.getLogger(__name__)

DEFAULT_SEED = 222


@dataclass(frozen=True)
class ParallelCorpus:
    id: str
    source_lang: str
    target_lang: str
    domain: str
    pairs: tuple[tuple[str, str], ...]
    provenance: str = ""

    def __post_init__(self):
        if not self.pairs:
            raise CorpusError(f"corpus {self.id!r}: no pairs")
        if not self.source_lang or not self.target_lang:
            raise CorpusError(f"corpus {self.id!r}: missing language code")
        if self.source_lang == self.target_lang:
            raise CorpusError(f"corpus {self.id!r}: source_lang == target_lang ({self.source_lang})")
        for i, (src, tgt) in enumerate(self.pairs):
            if not src.strip() or not tgt.strip():
                raise CorpusError(f"corpus {self.id!r}: empty side at pair {i}")
            if "\n" in src or "\n" in tgt:
                raise CorpusError(f"corpus {self.id!r}: newline inside pair {i}")

    def __len__(self) -> int:
        return len(self.pairs)

    def source_texts(self) -> list[str]:
        return [s for s, _ in self.pairs]

    def target_texts(self) -> list[str]:
        return [t for _, t in self.pairs]

    def meta(self) -> dict:
        return {
            "id": self.id,
            "source_lang": self.source_lang,
            "target_lang": self.target_lang,
            "domain": self.domain,
            "provenance": self.provenance,
            "n_pairs": len(self.pairs),
        }


@dataclass(frozen=True)
class VerseKeyedText:
    """Text keyed by canonical verse keys ``BOOK:chapter:verse``."""

    lang: str
    entries: Mapping[str, str]

    def __post_init__(self):
        if not self.entries:
            raise CorpusError(f"verse text {self.lang!r}: empty")
        for key, text in self.entries.items():
            parse_verse_key(key)
            if not text.strip():
                raise CorpusError(f"verse text {self.lang!r}: empty verse {key}")


@dataclass(frozen=True)
class SampleSpec:
    size: int
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.size <= 0:
            raise CorpusError(
                f"sample size must be positive, got {self.size} "
                "(represent an empty stage by omitting it, not by size 0)"
            )


def parse_verse_key(key: str) -> tuple[str, int, int]:
    parts = key.split(":")
    if len(parts) != 3:
        raise CorpusError(f"bad verse key {key!r}, expected book:chapter:verse")
    book, chapter, verse = parts
    if not book:
        raise CorpusError(f"bad verse key {key!r}: empty book")
    try:
        return book.upper(), int(chapter), int(verse)
    except ValueError:
        raise CorpusError(f"bad verse key {key!r}: chapter/verse must be integers") from None


def ingest_line_aligned(
    source_path: str | Path,
    target_path: str | Path,
    *,
    corpus_id: str,
    source_lang: str,
    target_lang: str,
    domain: str,
    provenance: str = "",
) -> ParallelCorpus:
    """Read two line-aligned files into a corpus.

    Trailing blank lines are trimmed before the line-count check.  Pairs with
    an empty or whitespace-only side are dropped; the drop count is logged and
    appended to the corpus provenance.
    """
    src_lines = _read_lines(source_path)
    tgt_lines = _read_lines(target_path)
    if len(src_lines) != len(tgt_lines):
        raise AlignmentError(
            f"line count mismatch: {source_path} has {len(src_lines)}, "
            f"{target_path} has {len(tgt_lines)}",
            left_count=len(src_lines),
            right_count=len(tgt_lines),
        )
    pairs = []
    dropped = 0
    for src, tgt in zip(src_lines, tgt_lines):
        if not src.strip() or not tgt.strip():
            dropped += 1
            continue
        pairs.append((src, tgt))
    if dropped:
        log.warning("%s: dropped %d pairs with an empty side", corpus_id, dropped)
        provenance = (provenance + f" [dropped {dropped} empty-sided pairs]").strip()
    return ParallelCorpus(
        id=corpus_id,
        source_lang=source_lang,
        target_lang=target_lang,
        domain=domain,
        pairs=tuple(pairs),
        provenance=provenance or f"line-aligned: {source_path} / {target_path}",
    )


def _read_lines(path: str | Path) -> list[str]:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line_no = raw.count(b"\n", 0, exc.start) + 1
        raise CorpusError(f"{path}: undecodable bytes at line {line_no}: {exc.reason}") from None
    lines = text.split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def read_verse_tsv(
    path: str | Path,
    lang: str,
    book_map: Mapping[str, str] | None = None,
) -> VerseKeyedText:
    """Read a verse-keyed TSV file.

    ``book_map`` translates localized book names to canonical codes before
    keys are canonicalized.
    """
    entries: dict[str, str] = {}
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"{path}:{line_no}: expected book:chapter:verse<TAB>text")
        key, text = line.split("\t", 1)
        book, chapter, verse = key.split(":") if key.count(":") == 2 else (None, None, None)
        if book is None:
            raise CorpusError(f"{path}:{line_no}: bad verse key {key!r}")
        if book_map and book in book_map:
            book = book_map[book]
        canonical = f"{book.upper()}:{int(chapter)}:{int(verse)}"
        if canonical in entries:
            raise CorpusError(f"{path}:{line_no}: duplicate verse key {canonical}")
        if not text.strip():
            raise CorpusError(f"{path}:{line_no}: empty verse text")
        entries[canonical] = text
    return VerseKeyedText(lang=lang, entries=entries)


def align_verses(
    a: VerseKeyedText,
    b: VerseKeyedText,
    *,
    corpus_id: str | None = None,
    domain: str = "bible",
    provenance: str = "",
) -> ParallelCorpus:
    """Pair verses present in both texts, in canonical (book, chapter, verse) order.

    Counts of keys unique to each side are logged; an empty intersection is an
    error.
    """
    keys_a = set(a.entries)
    keys_b = set(b.entries)
    common = keys_a & keys_b
    if not common:
        raise AlignmentError("no common verses", left_count=len(keys_a), right_count=len(keys_b))
    only_a = len(keys_a) - len(common)
    only_b = len(keys_b) - len(common)
    if only_a or only_b:
        log.warning(
            "verse alignment %s/%s: %d unmatched on %s side, %d on %s side",
            a.lang, b.lang, only_a, a.lang, only_b, b.lang,
        )
    ordered = sorted(common, key=parse_verse_key)
    pairs = tuple((a.entries[k], b.entries[k]) for k in ordered)
    return ParallelCorpus(
        id=corpus_id or f"{a.lang}-{b.lang}-verses",
        source_lang=a.lang,
        target_lang=b.lang,
        domain=domain,
        pairs=pairs,
        provenance=provenance
        or f"verse-aligned: {len(common)} common, {only_a}/{only_b} unmatched",
    )


def sample_subset(corpus: ParallelCorpus, spec: SampleSpec) -> ParallelCorpus:
    """Deterministic seeded subsample.

    One seeded shuffle of the indices, take the first ``spec.size``: subsets of
    the same corpus and seed are nested, ``sample(n)`` is a prefix of
    ``sample(m)`` for n < m.
    """
    n = len(corpus.pairs)
    if spec.size > n:
        raise CorpusError(f"sample size {spec.size} exceeds corpus size {n}")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)[: spec.size]
    pairs = tuple(corpus.pairs[i] for i in order)
    return ParallelCorpus(
        id=f"{corpus.id}@{spec.size}s{spec.seed}",
        source_lang=corpus.source_lang,
        target_lang=corpus.target_lang,
        domain=corpus.domain,
        pairs=pairs,
        provenance=f"{corpus.provenance} [subset {spec.size}/{n} seed {spec.seed}]".strip(),
    )


def save_corpus(corpus: ParallelCorpus, prefix: str | Path) -> None:
    """Write ``<prefix>.src.txt``, ``<prefix>.tgt.txt`` and the JSON sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.src.txt").write_text(
        "\n".join(corpus.source_texts()) + "\n", encoding="utf-8"
    )
    Path(f"{prefix}.tgt.txt").write_text(
        "\n".join(corpus.target_texts()) + "\n", encoding="utf-8"
    )
    Path(f"{prefix}.json").write_text(
        json.dumps(corpus.meta(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def load_corpus(prefix: str | Path) -> ParallelCorpus:
    from dataclasses import replace

    meta_path = Path(f"{prefix}.json")
    if not meta_path.exists():
        raise CorpusError(f"no corpus sidecar at {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    corpus = ingest_line_aligned(
        Path(f"{prefix}.src.txt"),
        Path(f"{prefix}.tgt.txt"),
        corpus_id=meta["id"],
        source_lang=meta["source_lang"],
        target_lang=meta["target_lang"],
        domain=meta["domain"],
        provenance=meta.get("provenance", ""),
    )
    # keep the saved provenance verbatim (ingest substitutes a default)
    return replace(corpus, provenance=meta.get("provenance", ""))
