"""Corpus BLEU-4 with clipped n-gram precision and brevity penalty.

Counts pool over the whole corpus before any ratio is taken; the score is
computed on whitespace-split words. Unsmoothed by default (any zero
precision zeroes the score); add-one smoothing is available for tiny
corpora.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from .errors import ContractError


@dataclass
class BLEUReport:
    precisions: List[float]      # modified n-gram precisions p_1..p_max_n
    brevity_penalty: float
    bleu: float                  # in [0, 1]
    hyp_length: int              # lc
    ref_length: int              # lr
    smoothing: str = "none"

    def format_text(self) -> str:
        pn = " / ".join(f"p{i + 1}={p:.4f}" for i, p in enumerate(self.precisions))
        return (f"BLEU = {self.bleu:.4f}  ({pn})  BP = "
                f"{self.brevity_penalty:.4f}  lc/lr = {self.hyp_length}/"
                f"{self.ref_length}")

    def format_machine(self) -> str:
        lines = [f"bleu = {self.bleu!r}",
                 f"brevity_penalty = {self.brevity_penalty!r}",
                 f"hyp_length = {self.hyp_length}",
                 f"ref_length = {self.ref_length}",
                 f"smoothing = {self.smoothing}"]
        lines += [f"p{i + 1} = {p!r}" for i, p in enumerate(self.precisions)]
        return "\n".join(lines)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_matches(hyp_tokens: Sequence[str], ref_tokens: Sequence[str],
                    n: int) -> Tuple[int, int]:
    """(clipped match count, hypothesis n-gram count) for one sentence."""
    hyp_counts = ngram_counts(hyp_tokens, n)
    ref_counts = ngram_counts(ref_tokens, n)
    matches = sum(min(count, ref_counts[gram])
                  for gram, count in hyp_counts.items())
    return matches, max(len(hyp_tokens) - n + 1, 0)


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str],
                max_n: int = 4, smoothing: str = "none") -> BLEUReport:
    """Corpus-pooled BLEU over aligned hypothesis/reference line lists."""
    if len(hypotheses) != len(references):
        raise ContractError(
            f"hypothesis/reference counts differ: {len(hypotheses)} vs "
            f"{len(references)}")
    if not hypotheses:
        raise ContractError("empty corpus")
    if smoothing not in ("none", "add_one"):
        raise ContractError(f"unknown smoothing {smoothing!r}")

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp_line, ref_line in zip(hypotheses, references):
        hyp_tokens = hyp_line.split()
        ref_tokens = ref_line.split()
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, max_n + 1):
            m, t = clipped_matches(hyp_tokens, ref_tokens, n)
            matches[n - 1] += m
            totals[n - 1] += t

    # An order with no hypothesis n-grams at all is vacuously satisfied
    # (precision 1); this keeps identity corpora at BLEU 1 even when every
    # sentence is shorter than max_n.
    if smoothing == "add_one":
        precisions = [(m + 1) / (t + 1) if t else 1.0
                      for m, t in zip(matches, totals)]
    else:
        precisions = [m / t if t else 1.0 for m, t in zip(matches, totals)]

    if hyp_len == 0:
        return BLEUReport(precisions, 0.0, 0.0, 0, ref_len, smoothing)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0:
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BLEUReport(precisions, bp, bleu, hyp_len, ref_len, smoothing)
