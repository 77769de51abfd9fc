"""Corpus-level BLEU, subword BLEU and correlation statistics.

BLEU follows the standard corpus formulation: clipped modified n-gram
precisions for n=1..4 pooled over the corpus, geometric mean, multiplicative
brevity penalty, and exponential smoothing of zero higher-order precisions
(each zero precision n becomes 100 / (2^k * total_n) with k counting the
zeros so far).  Scores are 0..100.  Single reference per hypothesis.

Subword BLEU encodes both sides with a fixed subword model to symbol strings
(not ids, so distinct unknown characters can never spuriously match) and
runs the same corpus BLEU; the model identity is part of the signature, so
scores are only comparable within one model.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MetricsError
from .textprep import SubwordModel, encode_symbols

VERSION = "0.1.0"
NGRAM_ORDER = 4

# stand-in for log(0) so a zero precision forces the score to zero
_LOG_FLOOR = -9999999999


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    signature: str

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
            "signature": self.signature,
        }

    def __str__(self) -> str:
        return f"{self.score:.1f}  {self.signature}"


@dataclass(frozen=True)
class CorrelationReport:
    n: int
    pearson_r: float
    r_squared: float
    pairs: tuple[tuple[float, float], ...]


def _ngrams(tokens: Sequence[str], max_order: int = NGRAM_ORDER) -> Counter:
    counts: Counter = Counter()
    for n in range(1, max_order + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


def bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    *,
    signature_tok: str = "word",
) -> BleuScore:
    """Corpus BLEU over pre-tokenized sentences, one reference each."""
    if len(hypotheses) != len(references):
        raise MetricsError(
            f"hypothesis/reference count mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise MetricsError("empty corpus")

    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        ref_ngrams = _ngrams(ref)
        for ngram, count in _ngrams(hyp).items():
            n = len(ngram) - 1
            total[n] += count
            correct[n] += min(count, ref_ngrams.get(ngram, 0))

    precisions = [0.0] * NGRAM_ORDER
    smooth = 1.0
    for n in range(NGRAM_ORDER):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2.0
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0

    log_sum = sum(math.log(p) if p > 0.0 else _LOG_FLOOR for p in precisions)
    # cap the exp/log float wobble so a perfect corpus scores exactly 100
    score = min(bp * math.exp(log_sum / NGRAM_ORDER), 100.0)
    signature = f"bleu|n:{NGRAM_ORDER}|smooth:exp|tok:{signature_tok}|itftlab:{VERSION}"
    return BleuScore(
        score=score,
        precisions=tuple(precisions),
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
        signature=signature,
    )


def sp_bleu(
    model: SubwordModel,
    hypotheses: Sequence[str],
    references: Sequence[str],
) -> BleuScore:
    """BLEU over subword symbol sequences under a fixed subword model."""
    hyp_tok = [encode_symbols(model, h) for h in hypotheses]
    ref_tok = [encode_symbols(model, r) for r in references]
    return bleu(hyp_tok, ref_tok, signature_tok=f"spm-{model.model_id}")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> CorrelationReport:
    """Sample Pearson correlation; r_squared is exactly pearson_r squared."""
    if len(xs) != len(ys):
        raise MetricsError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 3:
        raise MetricsError(f"need at least 3 samples, got {len(xs)}")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.sum(dx * dx))
    syy = float(np.sum(dy * dy))
    if sxx == 0.0 or syy == 0.0:
        raise MetricsError("undefined correlation: constant input")
    r = float(np.sum(dx * dy)) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    return CorrelationReport(
        n=len(xs),
        pearson_r=r,
        r_squared=r * r,
        pairs=tuple(zip(map(float, x), map(float, y))),
    )


def correlate_divergence(
    records: Sequence,
    matrix,
    stage: str,
    *,
    out_domain_only: bool = True,
) -> CorrelationReport:
    """Correlate test spBLEU against the JSD between a stage's domain and the
    test domain.

    ``stage`` is "intermediate" or "final".  One sample per (run, test,
    direction); baseline runs contribute no samples for the intermediate
    stage.  A missing matrix cell is an error naming the run.
    """
    if stage not in ("intermediate", "final"):
        raise MetricsError(f"unknown stage {stage!r}")
    xs: list[float] = []
    ys: list[float] = []
    for record in records:
        if record.status != "ok":
            continue
        domain = record.intermediate_domain if stage == "intermediate" else record.final_domain
        if domain is None:
            continue
        for entry in record.scores:
            if out_domain_only and entry["in_domain"]:
                continue
            cell = matrix.get(domain, entry["test_domain"])
            if cell is None:
                raise MetricsError(
                    f"run {record.plan_id}: no divergence cell "
                    f"({domain}, {entry['test_domain']})"
                )
            xs.append(cell)
            ys.append(entry["score"])
    return pearson(xs, ys)


def correlation_table(
    records: Sequence,
    matrix,
    *,
    out_domain_only: bool = True,
) -> list[dict]:
    """Per (intermediate size, final size) group, the intermediate- and
    final-stage divergence correlations (r_squared; None when undefined)."""
    groups: dict[tuple[int, int], list] = {}
    for record in records:
        if record.status != "ok":
            continue
        key = (record.intermediate_size or 0, record.final_size)
        groups.setdefault(key, []).append(record)
    table = []
    for (isize, fsize) in sorted(groups):
        row = {"intermediate_size": isize, "final_size": fsize}
        for stage in ("intermediate", "final"):
            try:
                rep = correlate_divergence(
                    groups[(isize, fsize)], matrix, stage, out_domain_only=out_domain_only
                )
                row[stage] = rep.r_squared
            except MetricsError:
                row[stage] = None
        table.append(row)
    return table
