"""Corpus BLEU, smoothed sentence BLEU and the paired sign test."""

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, Hashable, List, Sequence, Tuple

from scipy.stats import binomtest

from .errors import DataError

Tokens = Sequence[Hashable]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) + 1 - n))


def _clipped_counts(hyp: Tokens, ref: Tokens, n: int) -> Tuple[int, int]:
    hyp_counts = _ngrams(hyp, n)
    ref_counts = _ngrams(ref, n)
    matches = sum(min(count, ref_counts[ngram]) for ngram, count in hyp_counts.items())
    return matches, sum(hyp_counts.values())


def _brevity_penalty(hyp_length: int, ref_length: int) -> float:
    if hyp_length == 0:
        return 0.0
    if hyp_length < ref_length:
        return math.exp(1.0 - ref_length / hyp_length)
    return 1.0


@dataclass(frozen=True)
class BleuReport:
    score: float                      # 0..100
    precisions: Tuple[float, ...]     # p_1..p_max_n
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["precisions"] = list(self.precisions)
        return data


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> BleuReport:
    """Unsmoothed corpus BLEU with one reference per hypothesis."""
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_length = ref_length = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_length += len(hyp)
        ref_length += len(ref)
        for n in range(1, max_n + 1):
            m, t = _clipped_counts(hyp, ref, n)
            matches[n - 1] += m
            totals[n - 1] += t

    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = _brevity_penalty(hyp_length, ref_length)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(math.fsum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_length, ref_length)


def sentence_bleu(hyp: Tokens, ref: Tokens, max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing on orders n >= 2."""
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = _clipped_counts(hyp, ref, n)
        if n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    return 100.0 * _brevity_penalty(len(hyp), len(ref)) * math.exp(log_sum / max_n)


def sentence_scores(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> List[float]:
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    return [sentence_bleu(h, r, max_n) for h, r in zip(hypotheses, references)]


@dataclass(frozen=True)
class SignTestResult:
    wins: int
    losses: int
    ties: int
    p_value: float

    def to_dict(self) -> Dict:
        return asdict(self)


def sign_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> SignTestResult:
    """Two-sided exact sign test of system a against b; ties are dropped."""
    if len(scores_a) != len(scores_b):
        raise DataError(f"score lists differ in length: {len(scores_a)} vs {len(scores_b)}")
    wins = sum(a > b for a, b in zip(scores_a, scores_b))
    losses = sum(a < b for a, b in zip(scores_a, scores_b))
    ties = len(scores_a) - wins - losses
    if wins + losses == 0:
        return SignTestResult(wins, losses, ties, 1.0)
    p_value = binomtest(wins, wins + losses, 0.5, alternative="two-sided").pvalue
    return SignTestResult(wins, losses, ties, min(1.0, float(p_value)))
