"""Segmentation losses, RLE mask codec and box/mask metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .drr import LabeledBox

CLIP_DELTA = 1e-7
DEFAULT_EPS = 1e-6


class RleError(ValueError):
    pass


# -- RLE --------------------------------------------------------------------

@dataclass(frozen=True)
class RleMask:
    """Uncompressed COCO-style RLE: column-major, first run is background."""

    height: int
    width: int
    counts: Tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise RleError("mask dimensions must be positive")
        if any(c < 0 for c in self.counts):
            raise RleError("negative run length")
        if sum(self.counts) != self.height * self.width:
            raise RleError(f"counts sum {sum(self.counts)} != {self.height}x{self.width}")
        if any(c == 0 for c in self.counts[1:]):
            raise RleError("zero-length run after the leading position")

    def to_dict(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "RleMask":
        h, w = d["size"]
        return cls(int(h), int(w), tuple(int(c) for c in d["counts"]))


def rle_encode(mask) -> RleMask:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise RleError("mask must be 2-D")
    if m.dtype != bool and not np.all((m == 0) | (m == 1)):
        raise RleError("mask must be binary")
    flat = m.astype(bool).ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(int(m.shape[0]), int(m.shape[1]), tuple(int(c) for c in counts))


def rle_decode(r: RleMask) -> np.ndarray:
    if sum(r.counts) != r.height * r.width:
        raise RleError("counts do not cover the mask")
    values = np.arange(len(r.counts)) % 2 == 1
    flat = np.repeat(values, r.counts)
    return flat.reshape((r.height, r.width), order="F").astype(np.uint8)


# -- losses -----------------------------------------------------------------

def _pair(p, g) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {g.size} labels")
    return p, g


def dice_loss(p, g, eps: float = DEFAULT_EPS) -> float:
    p, g = _pair(p, g)
    denom = p.sum() + g.sum() + eps
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * np.dot(p, g) / denom)


def dice_loss_grad(p, g, eps: float = DEFAULT_EPS) -> np.ndarray:
    p, g = _pair(p, g)
    inter = np.dot(p, g)
    s = p.sum() + g.sum() + eps
    return -2.0 * (g * s - inter) / (s * s)


def bce_loss(p, g, delta: float = CLIP_DELTA) -> float:
    p, g = _pair(p, g)
    p = np.clip(p, delta, 1.0 - delta)
    return float(-np.mean(g * np.log(p) + (1.0 - g) * np.log1p(-p)))


def bce_loss_grad(p, g, delta: float = CLIP_DELTA) -> np.ndarray:
    """Gradient w.r.t. p of the clipped loss (zero where clipping is active)."""
    p, g = _pair(p, g)
    inside = (p > delta) & (p < 1.0 - delta)
    pc = np.clip(p, delta, 1.0 - delta)
    grad = -(g / pc - (1.0 - g) / (1.0 - pc)) / p.size
    return np.where(inside, grad, 0.0)


def token_cross_entropy(y_true, y_prob, delta: float = CLIP_DELTA) -> float:
    """Summed token cross-entropy.

    ``y_true`` is either class indices of shape (N,) or one-hot rows (N, C);
    ``y_prob`` is (N, C) with rows summing to 1.
    """
    probs = np.asarray(y_prob, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("predicted rows must be non-negative and sum to 1")
    y = np.asarray(y_true)
    if y.ndim == 2:
        if y.shape != probs.shape:
            raise ValueError(f"one-hot labels {y.shape} do not match predictions {probs.shape}")
        onehot = y.astype(np.float64)
    else:
        idx = y.astype(np.int64).ravel()
        if idx.size != probs.shape[0]:
            raise ValueError("one label per position required")
        onehot = np.zeros_like(probs)
        onehot[np.arange(idx.size), idx] = 1.0
    return float(-np.sum(onehot * np.log(np.clip(probs, delta, 1.0))))


@dataclass(frozen=True)
class LossWeights:
    token: float = 1.0
    dice: float = 2.0
    bce: float = 1.0

    def __post_init__(self):
        ws = (self.token, self.dice, self.bce)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError("weights must be non-negative and not all zero")


def seg_loss(token: float, dice: float, bce: float, w: LossWeights = LossWeights()) -> float:
    return w.token * token + w.dice * dice + w.bce * bce


# -- metrics ----------------------------------------------------------------

def box_iou(a: LabeledBox, b: LabeledBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_boxes(pred: Sequence[LabeledBox], gold: Sequence[LabeledBox], thresh: float) -> List[Tuple[int, int, float]]:
    """Greedy one-to-one matching, same class only, highest IoU first.

    Ties go to the lower prediction index, then the lower gold index.
    """
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gold):
            if p.class_id != g.class_id:
                continue
            iou = box_iou(p, g)
            if iou >= thresh:
                pairs.append((-iou, i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), []
    for neg_iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, -neg_iou))
    return out


def precision_at_iou(pred: Sequence[LabeledBox], gold: Sequence[LabeledBox], thresh: float = 0.5) -> float:
    if not 0 < thresh <= 1:
        raise ValueError("thresh must be in (0, 1]")
    if not pred:
        return 0.0
    return len(match_boxes(pred, gold, thresh)) / len(pred)


def dice_coefficient(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mask_iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    return 1.0 if union == 0 else int(np.logical_and(a, b).sum()) / union


def masks_to_rle(masks: Dict[int, np.ndarray]) -> List[dict]:
    return [{"class_id": int(c), **rle_encode(masks[c]).to_dict()} for c in sorted(masks)]
