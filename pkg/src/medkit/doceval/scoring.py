"""Document-benchmark scoring: entry matching, field P/R/F1, QA and judge hooks."""
from __future__ import annotations

import json
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tables import FIELDS, LabTable, canonicalize, classify_abnormality, parse_reference_interval

FUZZY_THRESHOLD = 0.85
COMPLEX_FIELDS = ("result", "reference", "abnormal")

_ABNORMAL_SYNONYMS = {
    "high": "high", "h": "high", "↑": "high", "偏高": "high", "高": "high",
    "low": "low", "l": "low", "↓": "low", "偏低": "low", "低": "low",
    "normal": "normal", "n": "normal", "正常": "normal",
    "unknown": "unknown",
}


def edit_similarity(a: str, b: str) -> float:
    """1 - Levenshtein(a, b) / max(len); 1.0 for two empty strings."""
    if a == b:
        return 1.0
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1]))
        prev = cur
    return 1.0 - prev[m] / max(n, m)


@dataclass(frozen=True)
class Match:
    pred: int
    gold: int
    exact: bool


def match_entries(pred: LabTable, gold: LabTable, threshold: float = FUZZY_THRESHOLD) -> List[Match]:
    """Maximum-cardinality one-to-one matching of entry names.

    Among maximum matchings, the one with the most exact-name pairs wins,
    then the one with the smallest summed row indices.
    """
    n_p, n_g = len(pred.rows), len(gold.rows)
    if n_p == 0 or n_g == 0:
        return []
    n = max(n_p, n_g)
    order_span = 2 * n
    k_exact = order_span * n + 1
    k_edge = (n + 1) * k_exact
    w = np.zeros((n_p, n_g))
    exact = np.zeros((n_p, n_g), dtype=bool)
    for i, pr in enumerate(pred.rows):
        for j, gr in enumerate(gold.rows):
            a, b = pr.value("entry_name"), gr.value("entry_name")
            if a == b:
                exact[i, j] = True
            elif edit_similarity(a, b) < threshold:
                continue
            w[i, j] = k_edge + k_exact * exact[i, j] + (order_span - i - j)
    rows, cols = linear_sum_assignment(w, maximize=True)
    out = [Match(int(i), int(j), bool(exact[i, j])) for i, j in zip(rows, cols) if w[i, j] > 0]
    return sorted(out, key=lambda m: m.gold)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def prf(self) -> Tuple[float, float, float]:
        return prf(self.tp, self.fp, self.fn)


def prf(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class FieldScores:
    micro: Tuple[float, float, float]
    macro_doc: Tuple[float, float, float]  # mean per-document (p, r, f1)
    per_field: Dict[str, Tuple[float, float, float]]
    counts: Counts
    per_doc: List[Tuple[float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        def block(t):
            return {"precision": t[0], "recall": t[1], "f1": t[2]}

        return {
            "micro": {**block(self.micro), "tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn},
            "macro_doc": block(self.macro_doc),
            "per_field": {k: block(v) for k, v in self.per_field.items()},
            "documents": len(self.per_doc),
        }


def _doc_counts(pred: LabTable, gold: LabTable) -> Dict[str, Counts]:
    per = {f: Counts() for f in FIELDS}
    matches = match_entries(pred, gold)
    hit_p = {m.pred for m in matches}
    hit_g = {m.gold for m in matches}
    for m in matches:
        pr, gr = pred.rows[m.pred], gold.rows[m.gold]
        for f in FIELDS:
            if pr.value(f) == gr.value(f):
                per[f].tp += 1
            else:
                per[f].fp += 1
                per[f].fn += 1
    for f in FIELDS:
        per[f].fn += len(gold.rows) - len(hit_g)
        per[f].fp += len(pred.rows) - len(hit_p)
    return per


def _aggregate(per_doc_counts: Sequence[Dict[str, Counts]], fields_: Sequence[str]) -> FieldScores:
    total = Counts()
    per_field = {f: Counts() for f in fields_}
    per_doc = []
    for doc in per_doc_counts:
        c = Counts()
        for f in fields_:
            c.add(doc[f])
            per_field[f].add(doc[f])
        total.add(c)
        # a document with nothing to find and nothing predicted is scored as perfect
        per_doc.append((1.0, 1.0, 1.0) if c.tp + c.fp + c.fn == 0 else c.prf())
    macro = tuple(float(np.mean([d[k] for d in per_doc])) if per_doc else 0.0 for k in range(3))
    return FieldScores(total.prf(), macro, {f: per_field[f].prf() for f in fields_}, total, per_doc)


def score_full_parse(docs: Sequence[Tuple[LabTable, LabTable]]) -> FieldScores:
    """Score (pred, gold) table pairs, one per document."""
    return _aggregate([_doc_counts(p, g) for p, g in docs], FIELDS)


def canonical_abnormal(s: str) -> str:
    c = canonicalize(s, "text")
    return _ABNORMAL_SYNONYMS.get(c, c)


def _complex_value(item: dict, name: str) -> Optional[str]:
    v = item.get(name)
    if v is None:
        return None
    v = str(v)
    if name == "abnormal":
        return canonical_abnormal(v)
    if name == "result":
        return canonicalize(v, "result")
    return canonicalize(v, "reference")


def gold_abnormal(gold: dict) -> str:
    """Gold abnormality label, derived from result vs reference when absent."""
    if gold.get("abnormal") is not None:
        return canonical_abnormal(str(gold["abnormal"]))
    res = canonicalize(str(gold.get("result", "")), "result")
    ref = parse_reference_interval(canonicalize(str(gold.get("reference", "")), "reference"))
    return classify_abnormality(res, ref).lower()


def score_complex_qa(items: Sequence[Tuple[Optional[dict], dict]]) -> FieldScores:
    """Score (pred, gold) triplets of result / reference / abnormal.

    A field absent from the prediction counts as a miss only; a present but
    wrong value counts as one FP and one FN.
    """
    docs = []
    for pred, gold in items:
        pred = pred or {}
        per = {f: Counts() for f in COMPLEX_FIELDS}
        for f in COMPLEX_FIELDS:
            g = gold_abnormal(gold) if f == "abnormal" else _complex_value(gold, f)
            p = _complex_value(pred, f)
            if p is None:
                per[f].fn += 1
            elif p == g:
                per[f].tp += 1
            else:
                per[f].fp += 1
                per[f].fn += 1
        docs.append(per)
    return _aggregate(docs, COMPLEX_FIELDS)


# -- judge hooks ------------------------------------------------------------

class JudgeError(RuntimeError):
    pass


def run_judge(command: Union[str, Sequence[str]], payload: dict, timeout: float = 120.0) -> float:
    """Send ``payload`` as JSON on stdin; expect ``{"score": s}`` with s in [0, 1] on stdout."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    try:
        proc = subprocess.run(argv, input=json.dumps(payload, ensure_ascii=False), capture_output=True,
                              text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise JudgeError(f"judge failed to run: {exc}") from None
    if proc.returncode != 0:
        raise JudgeError(f"judge exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    try:
        score = float(json.loads(proc.stdout)["score"])
    except (ValueError, KeyError, TypeError) as exc:
        raise JudgeError(f"judge output is not {{'score': number}}: {exc}") from None
    if not 0.0 <= score <= 1.0:
        raise JudgeError(f"judge score {score} outside [0, 1]")
    return score


def score_simple_qa(pred: str, gold: str, judge: Optional[Union[str, Sequence[str]]] = None,
                    question: Optional[str] = None) -> int:
    if canonicalize(pred, "text") == canonicalize(gold, "text"):
        return 1
    if judge is None:
        return 0
    score = run_judge(judge, {"question": question, "prediction": pred, "gold": gold})
    return int(score >= 0.5)


def judge_many(judge, payloads: Sequence[dict], jobs: int = 1) -> List[float]:
    """Judge scores in input order, calling at most ``jobs`` judges at once."""
    if jobs <= 1:
        return [run_judge(judge, p) for p in payloads]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda p: run_judge(judge, p), payloads))


def consensus_bucket(agree_before: bool, agree_after: bool) -> str:
    if agree_before:
        return "Easy"
    if agree_after:
        return "Hard"
    return "Discard"
