"""Token frequency distributions and KL / Jensen-Shannon divergence.

All divergences use base-2 logarithms, so JS divergence lives in [0, 1]
(1.0 exactly for disjoint supports).  A divergence matrix compares labeled
domain groups: per-language JSD, then the arithmetic mean across languages;
combinations with no shared language are absent, not zero.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import _kernels
from .corpus import ParallelCorpus, SampleSpec, sample_subset
from .errors import DivergenceError
from .textprep import DivergencePrepConfig, prep_for_divergence

_EPS = 1e-9


@dataclass(frozen=True)
class TokenDistribution:
    probs: Mapping[str, float]
    support_size: int
    token_total: int

    def __post_init__(self):
        if self.support_size != len(self.probs):
            raise DivergenceError("support_size does not match probs")
        total = 0.0
        for t, p in self.probs.items():
            if p <= 0.0:
                raise DivergenceError(f"non-positive probability for token {t!r}")
            total += p
        if abs(total - 1.0) > 1e-9:
            raise DivergenceError(f"probabilities sum to {total!r}, not 1")


def build_distribution(counts: Mapping[str, int]) -> TokenDistribution:
    total = sum(counts.values())
    if total <= 0 or not counts:
        raise DivergenceError("empty distribution")
    probs = {}
    for token, c in counts.items():
        if c < 0:
            raise DivergenceError(f"negative count for token {token!r}")
        if c > 0:
            probs[token] = c / total
    if not probs:
        raise DivergenceError("empty distribution")
    return TokenDistribution(probs=probs, support_size=len(probs), token_total=total)


def kl_divergence(p: TokenDistribution, q: TokenDistribution) -> float:
    """Kullback-Leibler divergence in bits; requires support(P) within support(Q)."""
    tokens = sorted(p.probs)
    q_probs = q.probs
    for t in tokens:
        if t not in q_probs:
            raise DivergenceError(f"support violation: token {t!r} not in Q")
    pa = np.array([p.probs[t] for t in tokens], dtype=np.float64)
    qa = np.array([q_probs[t] for t in tokens], dtype=np.float64)
    return float(_kernels.kl_bits(pa, qa))


def js_divergence(p: TokenDistribution, q: TokenDistribution) -> float:
    """Jensen-Shannon divergence in bits: half the KL of each side against the
    equal mixture, computed over the union support."""
    tokens = sorted(set(p.probs) | set(q.probs))
    pa = np.array([p.probs.get(t, 0.0) for t in tokens], dtype=np.float64)
    qa = np.array([q.probs.get(t, 0.0) for t in tokens], dtype=np.float64)
    val = 0.5 * float(_kernels.kl_vs_mix_bits(pa, qa)) + 0.5 * float(
        _kernels.kl_vs_mix_bits(qa, pa)
    )
    # snap float-noise overshoot back into the mathematical range
    if -_EPS < val < 0.0:
        return 0.0
    if 1.0 < val < 1.0 + _EPS:
        return 1.0
    return val


@dataclass
class DivergenceMatrix:
    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: dict[tuple[str, str], float]
    per_language: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def get(self, row: str, col: str) -> float | None:
        return self.values.get((row, col))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["train"] + list(self.cols))
        for r in self.rows:
            writer.writerow(
                [r] + [_fmt_cell(self.values.get((r, c))) for c in self.cols]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        cells = [
            {
                "train": r,
                "test": c,
                "jsd": self.values[(r, c)],
                "per_language": self.per_language.get((r, c), {}),
            }
            for r in self.rows
            for c in self.cols
            if (r, c) in self.values
        ]
        return json.dumps(
            {"rows": list(self.rows), "cols": list(self.cols), "cells": cells, "meta": self.meta},
            ensure_ascii=False,
            indent=2,
        )

    def render(self, digits: int = 2) -> str:
        """Plain-text grid with '-' for absent combinations."""
        width = max([len("train")] + [len(r) for r in self.rows]) + 2
        cw = max([digits + 3] + [len(c) + 1 for c in self.cols]) + 1
        out = ["train".ljust(width) + "".join(c.rjust(cw) for c in self.cols)]
        for r in self.rows:
            cells = []
            for c in self.cols:
                v = self.values.get((r, c))
                cells.append(("-" if v is None else f"{v:.{digits}f}").rjust(cw))
            out.append(r.ljust(width) + "".join(cells))
        return "\n".join(out)


def _fmt_cell(v: float | None) -> str:
    return "" if v is None else repr(v)


TokenGroups = Mapping[str, Mapping[str, Counter]]


def divergence_matrix(train_groups: TokenGroups, test_groups: TokenGroups) -> DivergenceMatrix:
    """JSD per (train label, test label), averaged over the shared languages.

    ``*_groups`` map domain label -> language -> token multiset (the output of
    divergence preprocessing).  Cells whose label pair shares no language are
    absent from the result.
    """
    train_dists = _build_group_distributions(train_groups, "train")
    test_dists = _build_group_distributions(test_groups, "test")
    rows = tuple(train_groups)
    cols = tuple(test_groups)
    values: dict[tuple[str, str], float] = {}
    per_language: dict[tuple[str, str], dict[str, float]] = {}
    for r in rows:
        for c in cols:
            langs = sorted(set(train_dists[r]) & set(test_dists[c]))
            if not langs:
                continue
            by_lang = {
                lang: js_divergence(train_dists[r][lang], test_dists[c][lang])
                for lang in langs
            }
            values[(r, c)] = float(np.mean([by_lang[lang] for lang in langs]))
            per_language[(r, c)] = by_lang
    return DivergenceMatrix(rows=rows, cols=cols, values=values, per_language=per_language)


def _build_group_distributions(groups: TokenGroups, side: str):
    dists: dict[str, dict[str, TokenDistribution]] = {}
    for label, by_lang in groups.items():
        dists[label] = {}
        for lang, counts in by_lang.items():
            try:
                dists[label][lang] = build_distribution(counts)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"{side} cell {label!r}, language {lang!r}: {exc}"
                ) from None
    return dists


DEFAULT_TRAIN_CELL_SIZE = 25_000
DEFAULT_TEST_CELL_SIZE = 1_000


def groups_from_corpora(
    corpora: Iterable[ParallelCorpus],
    cfg: DivergencePrepConfig,
    *,
    sides: str = "both",
    size: int | None = None,
    seed: int = 222,
) -> dict[str, dict[str, Counter]]:
    """Build label -> language -> multiset groups for the matrix.

    With ``sides="both"`` each corpus contributes its target side under the
    target language and its source side under the source language (texts for
    the same (domain, language) pool together).  ``"target"``/``"source"``
    restrict to one side.  ``size`` caps each corpus via deterministic
    subsampling before preprocessing.
    """
    if sides not in ("both", "target", "source"):
        raise DivergenceError(f"unknown sides policy {sides!r}")
    pools: dict[str, dict[str, list[str]]] = {}
    for corpus in corpora:
        if size is not None and size < len(corpus):
            corpus = sample_subset(corpus, SampleSpec(size=size, seed=seed))
        group = pools.setdefault(corpus.domain, {})
        if sides in ("both", "target"):
            group.setdefault(corpus.target_lang, []).extend(corpus.target_texts())
        if sides in ("both", "source"):
            group.setdefault(corpus.source_lang, []).extend(corpus.source_texts())
    return {
        label: {lang: prep_for_divergence(texts, cfg) for lang, texts in by_lang.items()}
        for label, by_lang in pools.items()
    }


def matrix_from_corpora(
    train_corpora: Iterable[ParallelCorpus],
    test_corpora: Iterable[ParallelCorpus],
    cfg: DivergencePrepConfig | None = None,
    *,
    sides: str = "both",
    train_size: int | None = DEFAULT_TRAIN_CELL_SIZE,
    test_size: int | None = DEFAULT_TEST_CELL_SIZE,
    seed: int = 222,
) -> DivergenceMatrix:
    """Corpus-level convenience wrapper around :func:`divergence_matrix`."""
    cfg = cfg or DivergencePrepConfig()
    train_groups = groups_from_corpora(train_corpora, cfg, sides=sides, size=train_size, seed=seed)
    test_groups = groups_from_corpora(test_corpora, cfg, sides=sides, size=test_size, seed=seed)
    matrix = divergence_matrix(train_groups, test_groups)
    matrix.meta = {
        "sides": sides,
        "train_size": train_size,
        "test_size": test_size,
        "seed": seed,
        "lowercase": cfg.lowercase,
        "n_stopwords": len(cfg.stopwords),
    }
    return matrix
