"""Corpus BLEU-4 and word error rate over whitespace tokens."""
from __future__ import annotations

import math
from collections import Counter

from .errors import InputError


def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def corpus_bleu(references: list[str], hypotheses: list[str]) -> float:
    """Corpus-level BLEU-4 in [0, 100].

    Geometric mean of clipped n-gram precisions, n = 1..4, with add-one
    smoothing applied to n >= 2 only (unigram precision stays raw so an empty
    overlap scores 0), times the brevity penalty.
    """
    if not hypotheses:
        raise InputError("corpus_bleu needs at least one hypothesis")
    if len(references) != len(hypotheses):
        raise InputError(
            f"reference/hypothesis count mismatch: {len(references)} vs "
            f"{len(hypotheses)}"
        )
    matched = [0] * 5
    total = [0] * 5
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        r = ref.split()
        h = hyp.split()
        ref_len += len(r)
        hyp_len += len(h)
        for n in range(1, 5):
            counts = _ngrams(h, n)
            overlap = counts & _ngrams(r, n)
            matched[n] += sum(overlap.values())
            total[n] += sum(counts.values())
    if total[1] == 0 or matched[1] == 0:
        return 0.0
    log_sum = math.log(matched[1] / total[1])
    for n in range(2, 5):
        log_sum += math.log((matched[n] + 1) / (total[n] + 1))
    precision = math.exp(log_sum / 4.0)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * precision


def word_error_rate(reference: str, hypothesis: str) -> float:
    """Word-level Levenshtein distance divided by reference length."""
    r = reference.split()
    h = hypothesis.split()
    if not r:
        raise InputError("word_error_rate needs a non-empty reference")
    prev = list(range(len(h) + 1))
    for i, rw in enumerate(r, 1):
        cur = [i] + [0] * len(h)
        for j, hw in enumerate(h, 1):
            cur[j] = min(prev[j - 1] + (rw != hw), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[len(h)] / len(r)
