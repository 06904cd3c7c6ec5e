"""Quality filters, hash dedup, tag vocabulary checks and CoT record parsing."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .drr import LabeledBox
from .volume import ValidationReport

MIN_TOKENS = 10
MAX_TOKENS = 1024
MIN_PIXELS = 4096

MODALITIES = (
    "Histopathology", "CT", "X-Ray", "MRI", "NIR", "Ultrasound", "Microscopy", "OCT",
    "Dermoscopy", "Photograph", "Endoscopy", "Fundus", "Other",
)
TASKS = (
    "Examination Selection", "Report Analysis", "Prior Comparison", "Modality Recognition",
    "Organ Recognition", "Image Description", "Report Generation", "Lesion Localization",
    "Differential Diagnosis", "Symptoms Inference", "Treatment Generation", "Treatment Selection",
    "Treatment Details", "Basic", "Other",
)
REGIONS = (
    "Abdomen", "Chest", "Brain", "Neck", "Cell", "Lower Limb", "Upper Limb", "Oral Cavity",
    "Eye", "Breast", "Gastrointestinal Tract", "Pelvis", "Foot", "Joint", "Other",
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class Decision:
    keep: bool
    reason: Optional[str] = None

    @property
    def label(self) -> str:
        return "keep" if self.keep else "drop"


@dataclass(frozen=True)
class TextRecord:
    id: str
    text: str
    token_count: int


@dataclass(frozen=True)
class ImageMeta:
    id: str
    width: int
    height: int
    content_hash: str = ""


def filter_text(r: TextRecord) -> Decision:
    if r.token_count < MIN_TOKENS:
        return Decision(False, "too_short")
    if r.token_count > MAX_TOKENS:
        return Decision(False, "too_long")
    return Decision(True)


def filter_image(m: ImageMeta) -> Decision:
    # area reading of the pixel criterion
    if m.width * m.height < MIN_PIXELS:
        return Decision(False, "too_small")
    return Decision(True)


def fnv1a_64(data: bytes) -> str:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return f"{h:016x}"


def text_hash(text: str) -> str:
    return fnv1a_64(text.encode("utf-8"))


def dedup(records: Iterable[Tuple[str, str, Optional[str]]]) -> Tuple[List[str], List[str]]:
    """Exact-hash dedup over ``(id, text_hash, image_hash_or_None)``.

    Text-only records key on the text hash, multimodal ones on the
    (text, image) pair. First occurrence wins; both lists keep input order.
    """
    seen = set()
    kept, dropped = [], []
    for rid, th, ih in records:
        key = ("t", th) if ih is None else ("ti", th, ih)
        if key in seen:
            dropped.append(rid)
        else:
            seen.add(key)
            kept.append(rid)
    return kept, dropped


def dedup_sharded(shards: Sequence[Sequence[Tuple[int, str, str, Optional[str]]]]) -> Tuple[List[str], List[str]]:
    """Dedup records split across shards; each row carries its input ordinal.

    The lowest ordinal wins, so any sharding reproduces the sequential result.
    """
    rows = sorted((r for shard in shards for r in shard), key=lambda r: r[0])
    return dedup((rid, th, ih) for _, rid, th, ih in rows)


@dataclass(frozen=True)
class TagRecord:
    modality: str
    task: str
    region: str


def validate_tags(t: TagRecord) -> ValidationReport:
    report = ValidationReport()
    for name, value, vocab in (("modality", t.modality, MODALITIES), ("task", t.task, TASKS),
                               ("region", t.region, REGIONS)):
        if value not in vocab:
            report.add(name, f"{value!r} is not a known {name} tag")
    return report


# -- chain-of-thought records ----------------------------------------------

class CoTParseError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


# class id attached to boxes cited in reasoning text, which carry no label
COT_BOX_CLASS = 1

_BBOX_RE = re.compile(r"<bbox>(.*?)</bbox>", re.S)
_STEP_SPLIT_RE = re.compile(r"\n+|\s*(?:→|->)\s*")
_TAG_RE = re.compile(r"</?(think|answer|bbox)>")


@dataclass(frozen=True)
class CoTStep:
    text: str
    boxes: Tuple[LabeledBox, ...] = ()


@dataclass(frozen=True)
class CoTRecord:
    think_steps: Tuple[CoTStep, ...]
    answer: str


def _single_block(text: str, tag: str) -> str:
    opens = text.count(f"<{tag}>")
    closes = text.count(f"</{tag}>")
    if opens == 0 and closes == 0:
        raise CoTParseError(f"missing_{tag}")
    if opens != 1 or closes != 1:
        raise CoTParseError("unbalanced_tags", tag)
    start = text.index(f"<{tag}>") + len(tag) + 2
    end = text.index(f"</{tag}>")
    if end < start:
        raise CoTParseError("unbalanced_tags", tag)
    return text[start:end]


def _parse_box(payload: str) -> LabeledBox:
    parts = [p.strip() for p in payload.split(",")]
    if len(parts) != 4:
        raise CoTParseError("malformed_bbox", f"expected 4 values, got {payload!r}")
    if not all(re.fullmatch(r"\d+", p) for p in parts):
        raise CoTParseError("malformed_bbox", f"non-integer payload {payload!r}")
    x1, y1, x2, y2 = (int(p) for p in parts)
    if x1 > x2 or y1 > y2:
        raise CoTParseError("degenerate_box", payload)
    return LabeledBox(COT_BOX_CLASS, x1, y1, x2, y2)


def parse_cot_record(text: str) -> CoTRecord:
    """Parse ``<think>...</think><answer>...</answer>`` markup.

    Steps are separated by newlines or arrows (``→`` / ``->``); each
    ``<bbox>x1,y1,x2,y2</bbox>`` attaches to the step it appears in.
    """
    think = _single_block(text, "think")
    answer = _single_block(text, "answer").strip()
    if text.index("</think>") > text.index("<answer>"):
        raise CoTParseError("unbalanced_tags", "answer must follow think")
    if not answer:
        raise CoTParseError("empty_answer")
    if _TAG_RE.search(answer):
        raise CoTParseError("unbalanced_tags", "markup inside answer")
    if _TAG_RE.search(_BBOX_RE.sub("", think)):
        raise CoTParseError("unbalanced_tags", "stray markup inside think")

    # protect bbox payloads from the step splitter
    boxes: List[LabeledBox] = []

    def _stash(m: re.Match) -> str:
        boxes.append(_parse_box(m.group(1)))
        return f"\x00{len(boxes) - 1}\x00"

    masked = _BBOX_RE.sub(_stash, think)
    steps = []
    for raw in _STEP_SPLIT_RE.split(masked):
        refs = [int(i) for i in re.findall(r"\x00(\d+)\x00", raw)]
        words = re.sub(r"\x00\d+\x00", " ", raw).split()
        if not words and not refs:
            continue
        steps.append(CoTStep(" ".join(words), tuple(boxes[i] for i in refs)))
    if not steps:
        raise CoTParseError("no_steps")
    return CoTRecord(tuple(steps), answer)


def serialize_cot_record(rec: CoTRecord) -> str:
    lines = []
    for step in rec.think_steps:
        tags = " ".join(f"<bbox>{b.x_min},{b.y_min},{b.x_max},{b.y_max}</bbox>" for b in step.boxes)
        lines.append(" ".join(p for p in (step.text, tags) if p))
    return "<think>" + "\n".join(lines) + "</think><answer>" + rec.answer + "</answer>"


def cot_to_dict(rec: CoTRecord) -> dict:
    return {
        "think_steps": [{"text": s.text, "boxes": [list(b.coords) for b in s.boxes]} for s in rec.think_steps],
        "answer": rec.answer,
    }
