"""Lab-report tables: markdown parsing, canonical forms, reference intervals."""
from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

log = logging.getLogger(__name__)

FIELDS = ("entry_name", "result", "reference", "unit")

_SUPERSCRIPTS = str.maketrans("⁰¹²³⁴⁵⁶⁷⁸⁹⁺⁻", "0123456789+-")
_SUPER_RUN = re.compile(r"(\^?)([⁰¹²³⁴⁵⁶⁷⁸⁹⁺⁻]+)")
_DASHES = str.maketrans({c: "-" for c in "–—~～‐‑‒−"})
_COMPARATORS = str.maketrans({"≦": "≤", "≧": "≥", "＜": "<", "＞": ">"})
_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_NUM = r"[-+]?\d+(?:\.\d+)?"
_RESULT_FLAG = re.compile(rf"^({_NUM})\s*([HL])$")
_MARKERS = {"↑": "High", "↓": "Low", "*": "Abnormal"}


class TableParseError(ValueError):
    code = "no_table"


def _fold_superscripts(s: str) -> str:
    return _SUPER_RUN.sub(lambda m: "^" + m.group(2).translate(_SUPERSCRIPTS), s)


def _strip_markers(s: str) -> Tuple[str, Optional[str]]:
    flag = None
    changed = True
    while changed and s:
        changed = False
        for mark, name in _MARKERS.items():
            if s.startswith(mark) or s.endswith(mark):
                s = s.strip(mark).strip()
                flag = flag or name
                changed = True
        m = _RESULT_FLAG.match(s)
        if m:
            s = m.group(1)
            flag = flag or ("High" if m.group(2) == "H" else "Low")
            changed = True
    return s, flag


def _canon_once(s: str, field_kind: str) -> Tuple[str, Optional[str]]:
    s = _fold_superscripts(s)
    s = unicodedata.normalize("NFKC", s)
    s = s.translate(_DASHES).translate(_COMPARATORS)
    s = " ".join(s.split())
    s = _THOUSANDS.sub("", s)
    flag = None
    if field_kind in ("result", "reference"):
        s = re.sub(r"\s*-\s*(?=[\d.])", "-", s) if field_kind == "reference" else s
        s = re.sub(r"([<>≤≥=])\s+", r"\1", s)
    if field_kind == "result":
        s, flag = _strip_markers(s)
    if field_kind in ("entry_name", "unit", "text"):
        s = s.casefold()
    return s, flag


def canonicalize_with_flag(s: str, field_kind: str = "text") -> Tuple[str, Optional[str]]:
    """Canonical form plus the abnormality marker stripped from a result, if any."""
    flag = None
    for _ in range(8):
        new, f = _canon_once(s, field_kind)
        flag = flag or f
        if new == s:
            break
        s = new
    return s, flag


def canonicalize(s: str, field_kind: str = "text") -> str:
    return canonicalize_with_flag(s, field_kind)[0]


@dataclass(frozen=True)
class LabRow:
    entry_name: str
    result: str
    reference: str
    unit: str
    canon: Tuple[str, str, str, str] = field(default=("", "", "", ""), compare=False, repr=False)
    flag: Optional[str] = field(default=None, compare=False)

    @classmethod
    def make(cls, entry_name: str, result: str = "", reference: str = "", unit: str = "") -> "LabRow":
        result_c, flag = canonicalize_with_flag(result, "result")
        canon = (canonicalize(entry_name, "entry_name"), result_c,
                 canonicalize(reference, "reference"), canonicalize(unit, "unit"))
        if not canon[0]:
            raise ValueError("entry_name must be non-empty")
        return cls(entry_name, result, reference, unit, canon, flag)

    def value(self, name: str) -> str:
        return self.canon[FIELDS.index(name)]


@dataclass(frozen=True)
class LabTable:
    rows: Tuple[LabRow, ...] = ()

    @classmethod
    def from_rows(cls, rows) -> "LabTable":
        seen, out = set(), []
        for r in rows:
            if r.canon in seen:
                continue
            seen.add(r.canon)
            out.append(r)
        return cls(tuple(out))

    def __len__(self) -> int:
        return len(self.rows)


def _cells(line: str) -> List[str]:
    s = line.strip()
    if s.startswith("|"):
        s = s[1:]
    if s.endswith("|"):
        s = s[:-1]
    return [c.strip() for c in s.split("|")]


_SEPARATOR = re.compile(r"^\|?\s*:?-+:?\s*(\|\s*:?-+:?\s*)*\|?\s*$")


def parse_markdown_table(text: str) -> LabTable:
    """First pipe table with at least four columns; header and separator skipped."""
    blocks: List[List[str]] = []
    current: List[str] = []
    for line in text.splitlines():
        if "|" in line:
            current.append(line)
        elif current:
            blocks.append(current)
            current = []
    if current:
        blocks.append(current)

    for block in blocks:
        header = _cells(block[0])
        if len(header) < 4:
            continue
        body = block[1:]
        if body and _SEPARATOR.match(body[0].strip()):
            body = body[1:]
        if len(header) > 4:
            log.warning("table has %d columns; using the first four", len(header))
        rows = []
        for line in body:
            cells = _cells(line)
            if len(cells) > 4:
                log.warning("row has %d cells; extra cells ignored", len(cells))
            cells = (cells + [""] * 4)[:4]
            try:
                rows.append(LabRow.make(*cells))
            except ValueError:
                log.warning("row without entry name skipped: %r", line)
        return LabTable.from_rows(rows)
    raise TableParseError("no_table")


def table_to_markdown(table: LabTable) -> str:
    lines = ["| entry_name | result | reference | unit |", "|---|---|---|---|"]
    for r in table.rows:
        lines.append(f"| {r.entry_name} | {r.result} | {r.reference} | {r.unit} |")
    return "\n".join(lines) + "\n"


# -- reference intervals ----------------------------------------------------

@dataclass(frozen=True)
class ReferenceInterval:
    kind: str  # closed | less_than | at_most | greater_than | at_least | unparseable
    lower: Optional[float] = None
    upper: Optional[float] = None


UNPARSEABLE = ReferenceInterval("unparseable")
_CLOSED_RE = re.compile(rf"^({_NUM})-({_NUM})$")
_ONE_SIDED = (
    (re.compile(rf"^(?:<=|≤)({_NUM})$"), "at_most"),
    (re.compile(rf"^(?:>=|≥)({_NUM})$"), "at_least"),
    (re.compile(rf"^<({_NUM})$"), "less_than"),
    (re.compile(rf"^>({_NUM})$"), "greater_than"),
)


def parse_reference_interval(s: str) -> ReferenceInterval:
    s = s.strip()
    m = _CLOSED_RE.match(s)
    if m:
        lo, hi = float(m.group(1)), float(m.group(2))
        return ReferenceInterval("closed", lo, hi) if lo <= hi else UNPARSEABLE
    for pattern, kind in _ONE_SIDED:
        m = pattern.match(s)
        if m:
            bound = float(m.group(1))
            if kind in ("at_most", "less_than"):
                return ReferenceInterval(kind, upper=bound)
            return ReferenceInterval(kind, lower=bound)
    return UNPARSEABLE


def _as_number(s: str) -> Optional[float]:
    return float(s) if re.fullmatch(_NUM, s.strip()) else None


def classify_abnormality(result: str, ref: ReferenceInterval) -> str:
    """Low / Normal / High / Unknown; interval bounds count as Normal."""
    r = _as_number(result)
    if r is None or ref.kind == "unparseable":
        return "Unknown"
    if ref.kind == "closed":
        return "Low" if r < ref.lower else "High" if r > ref.upper else "Normal"
    if ref.kind == "less_than":
        return "Normal" if r < ref.upper else "High"
    if ref.kind == "at_most":
        return "Normal" if r <= ref.upper else "High"
    if ref.kind == "greater_than":
        return "Normal" if r > ref.lower else "Low"
    if ref.kind == "at_least":
        return "Normal" if r >= ref.lower else "Low"
    return "Unknown"
