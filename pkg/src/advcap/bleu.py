"""Corpus-level BLEU with clipped n-gram precision and multi-reference support."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

ZERO_FLOOR = 1e-9
MAX_ORDER = 4


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple
    references: tuple

    def __init__(self, candidate: Sequence, references: Sequence[Sequence]):
        if not references:
            raise ValueError("an EvalPair needs at least one reference")
        object.__setattr__(self, "candidate", tuple(candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in references))


@dataclass
class BleuReport:
    score: float
    n_gram_precisions: list[float]
    brevity_penalty: float
    candidate_len: int
    effective_ref_len: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BleuReport":
        return cls(**d)


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_ngram_precision(pairs: Sequence[EvalPair], n: int) -> tuple[int, int]:
    """Corpus totals of (clipped matches, candidate n-grams) for order ``n``."""
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    matches = total = 0
    for pair in pairs:
        cand = ngram_counts(pair.candidate, n)
        if not cand:
            continue
        ceiling: Counter = Counter()
        for ref in pair.references:
            ceiling |= ngram_counts(ref, n)
        matches += sum(min(c, ceiling[g]) for g, c in cand.items())
        total += sum(cand.values())
    return matches, total


def closest_ref_length(candidate_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - candidate_len), r))


def brevity_penalty(candidate_len: int, effective_ref_len: int) -> float:
    if candidate_len < 0 or effective_ref_len < 0:
        raise ValueError("lengths must be non-negative")
    if candidate_len == 0:
        return 0.0
    if candidate_len >= effective_ref_len:
        return 1.0
    return math.exp(1.0 - effective_ref_len / candidate_len)


def corpus_bleu(pairs: Sequence[EvalPair], max_order: int = MAX_ORDER) -> BleuReport:
    if not pairs:
        raise ValueError("corpus_bleu needs at least one pair")
    precisions = []
    log_sum = 0.0
    for n in range(1, max_order + 1):
        m, t = clipped_ngram_precision(pairs, n)
        p = m / t if t else 0.0
        precisions.append(p)
        log_sum += math.log(p if m else ZERO_FLOOR)
    c = sum(len(p.candidate) for p in pairs)
    r = sum(closest_ref_length(len(p.candidate), [len(ref) for ref in p.references]) for p in pairs)
    bp = brevity_penalty(c, r)
    score = bp * math.exp(log_sum / max_order) if bp else 0.0
    return BleuReport(score=score, n_gram_precisions=precisions, brevity_penalty=bp,
                      candidate_len=c, effective_ref_len=r, degenerate=c == 0)
