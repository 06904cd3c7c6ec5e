"""Digitally reconstructed radiographs and projected label boxes.

Parallel-beam geometry. Images are indexed ``[row, col]``; for a ray along
axis ``a`` the columns run along the lower-numbered remaining volume axis and
rows along the higher one (ray Z: cols=x, rows=y; ray X: cols=y, rows=z;
ray Y: cols=x, rows=z). Box ``x`` coordinates are columns, ``y`` are rows.

Rotated projections keep the detector of the unrotated geometry (same pixel
grid and pitch) and rotate the whole ray bundle about the volume centre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .volume import AttenuationVolume

AXES = {"X": 0, "Y": 1, "Z": 2}
# cols, rows of the detector for each ray axis
_DETECTOR_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
_DEFAULT_ROTATE_ABOUT = {"X": "Z", "Y": "Z", "Z": "Y"}
_ROWS_PER_BLOCK = 16


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    axis: str = "Z"
    angle_deg: float = 0.0
    i0: float = 1.0
    step_mm: Optional[float] = None  # None -> half the smallest voxel spacing
    rotate_about: Optional[str] = None  # None -> fixed perpendicular axis per ray axis

    def __post_init__(self):
        if self.axis not in AXES:
            raise ProjectionError(f"axis must be one of X, Y, Z, got {self.axis!r}")
        if not (0.0 <= self.angle_deg < 360.0):
            raise ProjectionError(f"angle_deg must be in [0, 360), got {self.angle_deg}")
        if not self.i0 > 0:
            raise ProjectionError("i0 must be positive")
        if self.step_mm is not None and not self.step_mm > 0:
            raise ProjectionError("step_mm must be positive")
        if self.rotate_about is not None:
            if self.rotate_about not in AXES:
                raise ProjectionError(f"rotate_about must be one of X, Y, Z, got {self.rotate_about!r}")
            if self.rotate_about == self.axis:
                raise ProjectionError("rotate_about must differ from the ray axis")

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionConfig":
        known = {"axis", "angle_deg", "i0", "step_mm", "rotate_about"}
        extra = set(d) - known
        if extra:
            raise ProjectionError(f"unknown projection config keys: {sorted(extra)}")
        return cls(**d)

    @property
    def pivot(self) -> str:
        return self.rotate_about or _DEFAULT_ROTATE_ABOUT[self.axis]

    def step_for(self, spacing_mm: Sequence[float]) -> float:
        return self.step_mm if self.step_mm is not None else 0.5 * min(spacing_mm)


@dataclass(frozen=True)
class Radiograph:
    integrals: np.ndarray  # (height, width), line integral of mu, dimensionless
    transmitted: np.ndarray  # exp(-integrals), I/I0
    source_dims: Tuple[int, int, int]
    i0: float = 1.0

    @property
    def height(self) -> int:
        return int(self.integrals.shape[0])

    @property
    def width(self) -> int:
        return int(self.integrals.shape[1])

    @property
    def intensity(self) -> np.ndarray:
        return self.i0 * self.transmitted

    @classmethod
    def from_integrals(cls, integrals, source_dims, i0: float = 1.0) -> "Radiograph":
        integrals = np.asarray(integrals, dtype=np.float64)
        return cls(integrals, np.exp(-integrals), tuple(int(n) for n in source_dims), float(i0))


@dataclass(frozen=True)
class LabelVolume3D:
    dims: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    labels: np.ndarray  # non-negative ints, shape == dims, 0 = background

    def __post_init__(self):
        if tuple(self.labels.shape) != tuple(self.dims):
            raise ValueError(f"labels shape {self.labels.shape} != dims {self.dims}")

    @classmethod
    def from_array(cls, labels, spacing_mm=(1.0, 1.0, 1.0)) -> "LabelVolume3D":
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ValueError("labels must be 3-D")
        if np.any(labels < 0):
            raise ValueError("class ids must be non-negative")
        labels = labels.astype(np.int64)
        return cls(tuple(int(n) for n in labels.shape), tuple(float(s) for s in spacing_mm), labels)


@dataclass(frozen=True)
class LabeledBox:
    """Axis-aligned box with inclusive pixel coordinates."""

    class_id: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be positive, got {self.class_id}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self.coords}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinate {self.coords}")

    @property
    def coords(self) -> Tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "x_min": self.x_min, "y_min": self.y_min,
                "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledBox":
        return cls(int(d.get("class_id", 1)), int(d["x_min"]), int(d["y_min"]), int(d["x_max"]), int(d["y_max"]))


# -- geometry ---------------------------------------------------------------

def _to_image(arr2d: np.ndarray) -> np.ndarray:
    # remaining axes arrive as (col_axis, row_axis); images are (row, col)
    return np.ascontiguousarray(arr2d.T)


def _rotation(pivot: int, angle_deg: float) -> np.ndarray:
    k = np.zeros(3)
    k[pivot] = 1.0
    th = math.radians(angle_deg)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * kx + (1 - math.cos(th)) * (kx @ kx)


def _ray_bundle(dims, spacing, cfg: ProjectionConfig):
    """Origins (H, W, 3), direction (3,) and half extents of the volume box."""
    a = AXES[cfg.axis]
    col_ax, row_ax = _DETECTOR_AXES[a]
    rot = _rotation(AXES[cfg.pivot], cfg.angle_deg)
    d = rot[:, a]
    u = rot[:, col_ax]
    v = rot[:, row_ax]
    w, h = dims[col_ax], dims[row_ax]
    cs = (np.arange(w) - (w - 1) / 2.0) * spacing[col_ax]
    rs = (np.arange(h) - (h - 1) / 2.0) * spacing[row_ax]
    origins = rs[:, None, None] * v[None, None, :] + cs[None, :, None] * u[None, None, :]
    half = np.asarray(dims, dtype=np.float64) * np.asarray(spacing, dtype=np.float64) / 2.0
    return origins, d, half


def _slab_interval(origins: np.ndarray, d: np.ndarray, half: np.ndarray):
    t0 = np.full(origins.shape[:-1], -np.inf)
    t1 = np.full(origins.shape[:-1], np.inf)
    for i in range(3):
        o = origins[..., i]
        if abs(d[i]) < 1e-12:
            outside = (o < -half[i]) | (o > half[i])
            t1 = np.where(outside, -np.inf, t1)
            continue
        ta = (-half[i] - o) / d[i]
        tb = (half[i] - o) / d[i]
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    hit = t1 > t0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0), hit


def _sample_points(origins, d, half, step):
    t0, t1, hit = _slab_interval(origins, d, half)
    length = t1 - t0
    n_steps = int(math.ceil(float(length.max()) / step)) if hit.any() else 0
    j = np.arange(n_steps + 1, dtype=np.float64)
    t = np.minimum(t0[..., None] + j * step, t1[..., None])  # (..., M+1)
    pts = origins[..., None, :] + t[..., None] * d
    return t, pts, hit


def _fractional_index(pts, dims, spacing):
    dims = np.asarray(dims, dtype=np.float64)
    return pts / np.asarray(spacing) + (dims - 1) / 2.0


def _trilinear(mu: np.ndarray, f: np.ndarray) -> np.ndarray:
    dims = mu.shape
    out_shape = f.shape[:-1]
    f = f.reshape(-1, 3)
    i0 = np.empty(f.shape, dtype=np.int64)
    w = np.empty(f.shape)
    for ax in range(3):
        n = dims[ax]
        fa = np.clip(f[:, ax], 0.0, n - 1)
        base = np.minimum(np.floor(fa).astype(np.int64), max(n - 2, 0))
        i0[:, ax] = base
        w[:, ax] = fa - base if n > 1 else 0.0
    acc = np.zeros(f.shape[0])
    for cx in (0, 1):
        ix = np.minimum(i0[:, 0] + cx, dims[0] - 1)
        wx = w[:, 0] if cx else 1.0 - w[:, 0]
        for cy in (0, 1):
            iy = np.minimum(i0[:, 1] + cy, dims[1] - 1)
            wy = w[:, 1] if cy else 1.0 - w[:, 1]
            for cz in (0, 1):
                iz = np.minimum(i0[:, 2] + cz, dims[2] - 1)
                wz = w[:, 2] if cz else 1.0 - w[:, 2]
                acc += wx * wy * wz * mu[ix, iy, iz]
    return acc.reshape(out_shape)


def _nearest(labels: np.ndarray, f: np.ndarray) -> np.ndarray:
    idx = [np.clip(np.floor(f[..., ax] + 0.5).astype(np.int64), 0, labels.shape[ax] - 1) for ax in range(3)]
    return labels[idx[0], idx[1], idx[2]]


# -- public operations ------------------------------------------------------

def project_parallel(v: AttenuationVolume, axis: str = "Z", i0: float = 1.0) -> Radiograph:
    if v.mu.size == 0:
        raise ProjectionError("empty volume")
    if axis not in AXES:
        raise ProjectionError(f"axis must be one of X, Y, Z, got {axis!r}")
    a = AXES[axis]
    integrals = _to_image(v.mu.sum(axis=a) * v.spacing_mm[a])
    return Radiograph.from_integrals(integrals, v.dims, i0)


def project_at_angle(v: AttenuationVolume, cfg: ProjectionConfig) -> Radiograph:
    """Ray-marched trapezoidal line integrals through a trilinearly sampled volume.

    Angle 0 is the unrotated geometry and is answered by the exact voxel sum.
    """
    if v.mu.size == 0:
        raise ProjectionError("empty volume")
    if cfg.angle_deg == 0.0:
        return project_parallel(v, cfg.axis, cfg.i0)
    return Radiograph.from_integrals(_march(v.mu, v.spacing_mm, cfg), v.dims, cfg.i0)


def _march(mu: np.ndarray, spacing, cfg: ProjectionConfig) -> np.ndarray:
    origins, d, half = _ray_bundle(mu.shape, spacing, cfg)
    step = cfg.step_for(spacing)
    out = np.zeros(origins.shape[:2])
    for r0 in range(0, origins.shape[0], _ROWS_PER_BLOCK):
        block = origins[r0:r0 + _ROWS_PER_BLOCK]
        t, pts, _ = _sample_points(block, d, half, step)
        if t.shape[-1] < 2:
            continue
        vals = _trilinear(mu, _fractional_index(pts, mu.shape, spacing))
        dt = np.diff(t, axis=-1)
        out[r0:r0 + _ROWS_PER_BLOCK] = np.sum(dt * 0.5 * (vals[..., :-1] + vals[..., 1:]), axis=-1)
    return out


def project_labels(lv: LabelVolume3D, cfg: ProjectionConfig, paired=None) -> Dict[int, np.ndarray]:
    """Per-class binary masks: a pixel is set iff its ray touches a voxel of that class.

    ``paired`` is the radiograph (or attenuation volume) the masks belong to;
    its source dims must equal the label dims.
    """
    if paired is not None:
        ref_dims = paired.source_dims if isinstance(paired, Radiograph) else paired.dims
        if tuple(ref_dims) != tuple(lv.dims):
            raise ProjectionError(f"label dims {lv.dims} do not match paired projection dims {tuple(ref_dims)}")
    classes = [int(c) for c in np.unique(lv.labels) if c != 0]
    a = AXES[cfg.axis]
    if cfg.angle_deg == 0.0:
        return {c: _to_image(np.any(lv.labels == c, axis=a)) for c in classes}

    origins, d, half = _ray_bundle(lv.dims, lv.spacing_mm, cfg)
    step = cfg.step_for(lv.spacing_mm)
    masks = {c: np.zeros(origins.shape[:2], dtype=bool) for c in classes}
    for r0 in range(0, origins.shape[0], _ROWS_PER_BLOCK):
        block = origins[r0:r0 + _ROWS_PER_BLOCK]
        _, pts, hit = _sample_points(block, d, half, step)
        hits = _nearest(lv.labels, _fractional_index(pts, lv.dims, lv.spacing_mm))
        for c in classes:
            masks[c][r0:r0 + _ROWS_PER_BLOCK] = np.any(hits == c, axis=-1) & hit
    return masks


def boxes_from_labels(masks: Dict[int, np.ndarray]) -> List[LabeledBox]:
    boxes = []
    for c in sorted(masks):
        rows, cols = np.nonzero(masks[c])
        if rows.size == 0:
            continue
        boxes.append(LabeledBox(int(c), int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())))
    return boxes


def to_display(r: Radiograph, invert: bool = True) -> np.ndarray:
    """Min-max scale the line integrals to uint8; a constant image maps to 0."""
    x = r.integrals
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    img = np.rint((x - lo) / (hi - lo) * 255.0)
    if invert:
        img = 255.0 - img
    return img.astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path, optimize=False)
    else:
        write_pgm(img, path)
