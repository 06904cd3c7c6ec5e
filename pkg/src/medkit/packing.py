"""Best-fit sequence packing with a per-[SEG] mask index.

Long samples are cut into ``max_len`` chunks; chunks are then placed into
training sequences (bins) with best-fit-decreasing. Chunks are never split
during placement and no tokens are dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSample:
    id: str
    length: int
    seg_positions: Tuple[int, ...] = ()
    mask_refs: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.length < 1:
            raise PackingError(f"sample {self.id!r}: length must be positive")
        if len(self.seg_positions) != len(self.mask_refs):
            raise PackingError(f"sample {self.id!r}: seg_positions and mask_refs differ in length")
        prev = -1
        for p in self.seg_positions:
            if p <= prev or p >= self.length:
                raise PackingError(f"sample {self.id!r}: seg positions must be strictly increasing and < length")
            prev = p

    @classmethod
    def from_dict(cls, d: dict) -> "TokenSample":
        return cls(
            str(d["id"]),
            int(d["length"]),
            tuple(int(p) for p in d.get("seg_positions", ())),
            tuple(str(m) for m in d.get("mask_refs", ())),
        )


@dataclass(frozen=True)
class Chunk:
    sample_id: str
    chunk_index: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "chunk_index": self.chunk_index, "start": self.start, "end": self.end}


@dataclass(frozen=True)
class SegEntry:
    bin_id: int
    seg_slot: int
    image_slot: int
    mask_ref: str
    sample_id: str
    chunk_index: int
    offset: int  # token position inside the packed sequence

    def to_dict(self) -> dict:
        return {
            "bin": self.bin_id,
            "seg_slot": self.seg_slot,
            "image_slot": self.image_slot,
            "mask_ref": self.mask_ref,
            "sample_id": self.sample_id,
            "chunk_index": self.chunk_index,
            "offset": self.offset,
        }


@dataclass
class PackPlan:
    max_len: int
    bins: List[List[Chunk]]
    index_table: Dict[Tuple[int, int], SegEntry] = field(default_factory=dict)

    def bin_lengths(self) -> List[int]:
        return [sum(c.length for c in b) for b in self.bins]

    def to_dict(self) -> dict:
        return {
            "max_len": self.max_len,
            "bins": [[c.to_dict() for c in b] for b in self.bins],
            "index_table": [self.index_table[k].to_dict() for k in sorted(self.index_table)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PackPlan":
        bins = [[Chunk(str(c["sample_id"]), int(c["chunk_index"]), int(c["start"]), int(c["end"])) for c in b]
                for b in d["bins"]]
        table = {}
        for e in d.get("index_table", []):
            entry = SegEntry(int(e["bin"]), int(e["seg_slot"]), int(e["image_slot"]), str(e["mask_ref"]),
                             str(e["sample_id"]), int(e["chunk_index"]), int(e["offset"]))
            table[(entry.bin_id, entry.seg_slot)] = entry
        return cls(int(d["max_len"]), bins, table)


@dataclass(frozen=True)
class PackStats:
    bins: int
    total_tokens: int
    fill_ratio: float

    def to_dict(self) -> dict:
        return {"bins": self.bins, "total_tokens": self.total_tokens, "fill_ratio": self.fill_ratio}


def split_into_chunks(s: TokenSample, max_len: int) -> List[Chunk]:
    if max_len < 1:
        raise PackingError(f"max_len must be >= 1, got {max_len}")
    n = math.ceil(s.length / max_len)
    return [Chunk(s.id, i, i * max_len, min((i + 1) * max_len, s.length)) for i in range(n)]


def best_fit_pack(chunks: Iterable[Chunk], max_len: int) -> PackPlan:
    """Best-fit-decreasing placement.

    Chunks go longest first (ties by sample_id, then chunk_index) into the
    open bin with the least remaining room that still fits, lowest bin index
    on ties; otherwise a new bin is opened. Within a bin chunks keep their
    placement order.
    """
    if max_len < 1:
        raise PackingError(f"max_len must be >= 1, got {max_len}")
    order = sorted(chunks, key=lambda c: (-c.length, c.sample_id, c.chunk_index))
    bins: List[List[Chunk]] = []
    room: List[int] = []
    for c in order:
        if c.length < 1 or c.length > max_len:
            raise PackingError(f"chunk {c.sample_id}#{c.chunk_index} has length {c.length}, limit {max_len}")
        best: Optional[int] = None
        for i, r in enumerate(room):
            if c.length <= r and (best is None or r < room[best]):
                best = i
        if best is None:
            bins.append([c])
            room.append(max_len - c.length)
        else:
            bins[best].append(c)
            room[best] -= c.length
    return PackPlan(max_len, bins)


def build_index_table(plan: PackPlan, samples: Sequence[TokenSample]) -> PackPlan:
    by_id = {s.id: s for s in samples}
    if len(by_id) != len(samples):
        raise PackingError("duplicate sample ids")
    located: Dict[Tuple[str, int], Tuple[int, int]] = {}  # (sample, chunk) -> (bin, offset of chunk start)
    for b, chunks in enumerate(plan.bins):
        pos = 0
        for c in chunks:
            if c.sample_id not in by_id:
                raise PackingError(f"plan references unknown sample {c.sample_id!r}")
            if (c.sample_id, c.chunk_index) in located:
                raise PackingError(f"chunk {c.sample_id}#{c.chunk_index} placed twice")
            located[(c.sample_id, c.chunk_index)] = (b, pos)
            pos += c.length

    per_bin: Dict[int, List[Tuple[int, str, str, int]]] = {}
    for s in samples:
        for p, ref in zip(s.seg_positions, s.mask_refs):
            ci = p // plan.max_len
            if (s.id, ci) not in located:
                raise PackingError(f"seg position {p} of sample {s.id!r} has no chunk in the plan")
            b, chunk_off = located[(s.id, ci)]
            chunk = plan.bins[b][_find(plan.bins[b], s.id, ci)]
            if not chunk.start <= p < chunk.end:
                raise PackingError(f"seg position {p} of sample {s.id!r} falls outside chunk {ci}")
            per_bin.setdefault(b, []).append((chunk_off + p - chunk.start, ref, s.id, ci))

    table: Dict[Tuple[int, int], SegEntry] = {}
    for b in sorted(per_bin):
        for slot, (off, ref, sid, ci) in enumerate(sorted(per_bin[b])):
            table[(b, slot)] = SegEntry(b, slot, slot, ref, sid, ci, off)
    return PackPlan(plan.max_len, plan.bins, table)


def _find(chunks: List[Chunk], sample_id: str, chunk_index: int) -> int:
    for i, c in enumerate(chunks):
        if c.sample_id == sample_id and c.chunk_index == chunk_index:
            return i
    raise PackingError(f"chunk {sample_id}#{chunk_index} missing")


def utilization(plan: PackPlan) -> PackStats:
    total = sum(plan.bin_lengths())
    n = len(plan.bins)
    return PackStats(n, total, total / (n * plan.max_len) if n else 0.0)


def pack_samples(samples: Sequence[TokenSample], max_len: int) -> PackPlan:
    chunks = [c for s in samples for c in split_into_chunks(s, max_len)]
    return build_index_table(best_fit_pack(chunks, max_len), samples)
