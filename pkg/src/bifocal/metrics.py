"""Corpus-level BLEU-4, NIST-4 and ROUGE-4.

Every scorer takes a sequence of ``(hypothesis, references)`` pairs where the
hypothesis is a token sequence and ``references`` is a nonempty list of token
sequences.  Scores are reported on a 0-100 scale except NIST, which is
unbounded above.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

Tokens = Sequence[str]
Pair = tuple[Tokens, Sequence[Tokens]]

MAX_N = 4
# NIST brevity factor is 0.5 when the hypothesis is 2/3 of the reference length
NIST_BETA = math.log(0.5) / math.log(1.5) ** 2


def ngrams(tokens: Tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _check(pairs: Iterable[Pair]) -> list[tuple[tuple[str, ...], list[tuple[str, ...]]]]:
    out = []
    for hyp, refs in pairs:
        refs = [tuple(r) for r in refs]
        if not refs:
            raise ValueError("every pair needs at least one reference")
        out.append((tuple(hyp), refs))
    if not out:
        raise ValueError("empty hypothesis set")
    return out


def _clipped(hyp_counts: Counter, refs: list[tuple[str, ...]], n: int) -> Counter:
    best: Counter = Counter()
    for r in refs:
        best |= ngrams(r, n)
    return hyp_counts & best


def bleu4(pairs: Iterable[Pair]) -> float:
    """Corpus BLEU-4 with closest-reference brevity penalty and no smoothing."""
    pairs = _check(pairs)
    matches = [0] * MAX_N
    totals = [0] * MAX_N
    c = r = 0
    for hyp, refs in pairs:
        c += len(hyp)
        r += min((abs(len(ref) - len(hyp)), len(ref)) for ref in refs)[1]
        for n in range(1, MAX_N + 1):
            counts = ngrams(hyp, n)
            totals[n - 1] += sum(counts.values())
            matches[n - 1] += sum(_clipped(counts, refs, n).values())
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_N
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def nist_info(pairs: Iterable[Pair]) -> dict[tuple[str, ...], float]:
    """Information weight of every reference n-gram (n <= 4)."""
    pairs = _check(pairs)
    counts: Counter = Counter()
    words = 0
    for _, refs in pairs:
        for ref in refs:
            words += len(ref)
            for n in range(1, MAX_N + 1):
                counts.update(ngrams(ref, n))
    info = {}
    for gram, k in counts.items():
        prefix = words if len(gram) == 1 else counts[gram[:-1]]
        info[gram] = math.log2(prefix / k)
    return info


def nist4(pairs: Iterable[Pair]) -> float:
    """Corpus NIST-4: information-weighted clipped matches times the brevity factor."""
    pairs = _check(pairs)
    info = nist_info(pairs)
    gained = [0.0] * MAX_N
    totals = [0] * MAX_N
    c = 0
    r = 0.0
    for hyp, refs in pairs:
        c += len(hyp)
        r += sum(len(ref) for ref in refs) / len(refs)
        for n in range(1, MAX_N + 1):
            counts = ngrams(hyp, n)
            totals[n - 1] += sum(counts.values())
            gained[n - 1] += sum(info[g] * k for g, k in _clipped(counts, refs, n).items())
    score = sum(g / t for g, t in zip(gained, totals) if t > 0)
    if c == 0 or r == 0:
        return 0.0
    ratio = min(c / r, 1.0)
    return score * math.exp(NIST_BETA * math.log(ratio) ** 2)


def rouge4(pairs: Iterable[Pair], f1: bool = False) -> float:
    """Corpus ROUGE-4, micro-averaged recall (or F1 with ``f1=True``).

    References shorter than four tokens have no 4-grams and are skipped; the
    number skipped is available from :func:`rouge4_counts`.
    """
    hits, ref_total, hyp_total, _ = rouge4_counts(pairs)
    if ref_total == 0:
        raise ValueError("no scorable references")
    recall = hits / ref_total
    if not f1:
        return 100.0 * recall
    precision = hits / hyp_total if hyp_total else 0.0
    if recall + precision == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def rouge4_counts(pairs: Iterable[Pair]) -> tuple[int, int, int, int]:
    """(clipped hits, reference 4-grams, hypothesis 4-grams, skipped references)."""
    pairs = _check(pairs)
    hits = ref_total = hyp_total = skipped = 0
    for hyp, refs in pairs:
        h = ngrams(hyp, MAX_N)
        for ref in refs:
            if len(ref) < MAX_N:
                skipped += 1
                continue
            rc = ngrams(ref, MAX_N)
            hits += sum((h & rc).values())
            ref_total += sum(rc.values())
            hyp_total += sum(h.values())
    return hits, ref_total, hyp_total, skipped


def evaluate(pairs: Iterable[Pair]) -> dict[str, float]:
    pairs = _check(pairs)
    return {"BLEU-4": bleu4(pairs), "NIST-4": nist4(pairs), "ROUGE-4": rouge4(pairs)}


def format_scores(scores: dict[str, float]) -> str:
    return " ".join(f"{k} {scores[k]:.2f}" for k in ("BLEU-4", "NIST-4", "ROUGE-4"))
