"""ROUGE-L and CIDEr over pre-tokenized text."""
from __future__ import annotations

import math
from collections import Counter
from typing import Dict, List, Sequence, Tuple

CIDER_MAX_N = 4
CIDER_SCALE = 10.0


def tokenize(text: str) -> List[str]:
    return text.lower().split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Balanced LCS F-measure."""
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider_scores(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> List[float]:
    """Per-item CIDEr: TF-IDF cosine per n-gram order, averaged over n = 1..4, times 10.

    Document frequency is the number of references containing the n-gram.
    IDF is smoothed as ``ln((1 + N) / (1 + df)) + 1`` so that n-grams shared
    by every reference keep a positive weight even in tiny corpora.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise ValueError("empty corpus")
    n_items = len(references)
    ref_grams = [[_ngrams(r, n) for n in range(1, CIDER_MAX_N + 1)] for r in references]
    df: Dict[Tuple[str, ...], int] = Counter()
    for per_n in ref_grams:
        for grams in per_n:
            df.update(grams.keys())

    def idf(g) -> float:
        return math.log((1.0 + n_items) / (1.0 + df.get(g, 0))) + 1.0

    scores = []
    for cand, per_n in zip(candidates, ref_grams):
        total = 0.0
        for n in range(1, CIDER_MAX_N + 1):
            cg = _ngrams(cand, n)
            rg = per_n[n - 1]
            vc = {g: c * idf(g) for g, c in cg.items()}
            vr = {g: c * idf(g) for g, c in rg.items()}
            nc = math.sqrt(sum(v * v for v in vc.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nc > 0 and nr > 0:
                dot = sum(v * vr[g] for g, v in vc.items() if g in vr)
                total += dot / (nc * nr)
        scores.append(CIDER_SCALE * total / CIDER_MAX_N)
    return scores


def cider(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    s = cider_scores(candidates, references)
    return sum(s) / len(s)
