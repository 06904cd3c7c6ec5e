"""Brute-force reference implementations used only by the tests.

None of these import the code under test's internals; they recompute each
quantity the slow, obvious way.
"""
from __future__ import annotations

import itertools
import math


def min_bins_exhaustive(lengths, capacity):
    """Exact minimum bin count by trying every placement (fine for <= 8 items)."""
    items = sorted(lengths, reverse=True)
    best = [len(items)]

    def place(i, loads):
        if len(loads) >= best[0]:
            return
        if i == len(items):
            best[0] = len(loads)
            return
        tried = set()
        for b in range(len(loads)):
            if loads[b] + items[i] <= capacity and loads[b] not in tried:
                tried.add(loads[b])
                loads[b] += items[i]
                place(i + 1, loads)
                loads[b] -= items[i]
        loads.append(items[i])
        place(i + 1, loads)
        loads.pop()

    place(0, [])
    return best[0] if items else 0


def ray_any_scan(labels, axis, cls):
    """Per-ray loop: pixel (row, col) is set iff some voxel on the ray has class ``cls``."""
    nx, ny, nz = labels.shape
    if axis == 2:
        return [[any(labels[x, y, z] == cls for z in range(nz)) for x in range(nx)] for y in range(ny)]
    if axis == 0:
        return [[any(labels[x, y, z] == cls for x in range(nx)) for y in range(ny)] for z in range(nz)]
    return [[any(labels[x, y, z] == cls for y in range(ny)) for x in range(nx)] for z in range(nz)]


def hull_scan(mask):
    xs, ys = [], []
    for r, row in enumerate(mask):
        for c, v in enumerate(row):
            if v:
                xs.append(c)
                ys.append(r)
    if not xs:
        return None
    return (min(xs), min(ys), max(xs), max(ys))


def max_matching_size(n_pred, n_gold, edge):
    """Exhaustive maximum bipartite matching size; ``edge(i, j)`` -> bool."""
    best = 0
    golds = list(range(n_gold))
    for k in range(min(n_pred, n_gold), 0, -1):
        for preds in itertools.combinations(range(n_pred), k):
            for gs in itertools.permutations(golds, k):
                if all(edge(p, g) for p, g in zip(preds, gs)):
                    return k
    return best


def lcs_brute(a, b):
    """LCS length by checking subsequences of the shorter sequence, longest first."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            sub = [short[i] for i in idx]
            it = iter(long_)
            if all(any(x == y for y in it) for x in sub):
                return k
    return 0


def cider_brute(candidates, references, max_n=4):
    """Dense-vector CIDEr with the smoothed IDF ln((1+N)/(1+df)) + 1."""
    n_items = len(references)
    scores = []
    for cand, ref in zip(candidates, references):
        total = 0.0
        for n in range(1, max_n + 1):
            def grams(toks):
                return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]

            vocab = sorted(set(grams(cand)) | set(grams(ref)))
            if not vocab:
                continue
            weights = []
            for g in vocab:
                df = sum(1 for r in references if g in grams(r))
                weights.append(math.log((1 + n_items) / (1 + df)) + 1)
            vc = [grams(cand).count(g) * w for g, w in zip(vocab, weights)]
            vr = [grams(ref).count(g) * w for g, w in zip(vocab, weights)]
            nc = math.sqrt(sum(x * x for x in vc))
            nr = math.sqrt(sum(x * x for x in vr))
            if nc and nr:
                total += sum(x * y for x, y in zip(vc, vr)) / (nc * nr)
        scores.append(10.0 * total / max_n)
    return sum(scores) / len(scores)


def central_diff(f, x, h=1e-5):
    grad = []
    for i in range(len(x)):
        up = list(x)
        dn = list(x)
        up[i] += h
        dn[i] -= h
        grad.append((f(up) - f(dn)) / (2 * h))
    return grad
