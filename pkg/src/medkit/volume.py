"""CT volume I/O, metadata checks and HU to attenuation conversion.

A volume on disk is a JSON header next to a raw little-endian int16 payload
stored x-fastest. In memory the voxel array is indexed ``[x, y, z]`` so its
shape equals ``header.dims``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

ORTHO_TOL = 1e-3
DEFAULT_MU_WATER = 0.02  # mm^-1
SUPPORTED_DTYPES = ("int16",)
SUPPORTED_BYTE_ORDERS = ("little-endian",)
HEADER_KEYS = ("dims", "spacing_mm", "orientation", "dtype", "byte_order", "data_path")


class VolumeError(Exception):
    code = "volume_error"

    def __init__(self, message: str):
        super().__init__(f"{self.code}: {message}")
        self.message = message


class MalformedHeaderError(VolumeError):
    code = "malformed_header"


class SizeMismatchError(VolumeError):
    code = "size_mismatch"


class UnreadableDataError(VolumeError):
    code = "unreadable_data"


class InvalidMetadataError(VolumeError):
    code = "invalid_metadata"

    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("; ".join(f"{c}: {m}" for c, m in report.failures))


@dataclass(frozen=True)
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    orientation: Tuple[Tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    dtype: str = "int16"
    byte_order: str = "little-endian"
    data_path: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeHeader":
        missing = [k for k in HEADER_KEYS if k not in d]
        if missing:
            raise MalformedHeaderError(f"missing keys {missing}")
        try:
            dims = tuple(int(v) for v in d["dims"])
            spacing = tuple(float(v) for v in d["spacing_mm"])
            orient = tuple(tuple(float(v) for v in row) for row in d["orientation"])
        except (TypeError, ValueError) as exc:
            raise MalformedHeaderError(str(exc)) from None
        if len(dims) != 3 or len(spacing) != 3 or len(orient) != 3 or any(len(r) != 3 for r in orient):
            raise MalformedHeaderError("dims, spacing_mm and orientation must be 3-element / 3x3")
        if not isinstance(d["data_path"], str):
            raise MalformedHeaderError("data_path must be a string")
        return cls(dims, spacing, orient, str(d["dtype"]), str(d["byte_order"]), d["data_path"])

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "orientation": [list(r) for r in self.orientation],
            "dtype": self.dtype,
            "byte_order": self.byte_order,
            "data_path": self.data_path,
        }

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))


@dataclass
class ValidationReport:
    failures: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def add(self, check_id: str, message: str) -> None:
        self.failures.append((check_id, message))

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failures": [{"check_id": c, "message": m} for c, m in self.failures]}


@dataclass(frozen=True)
class Volume3D:
    header: VolumeHeader
    voxels: np.ndarray  # int16, shape == header.dims

    def __post_init__(self):
        if tuple(self.voxels.shape) != tuple(self.header.dims):
            raise SizeMismatchError(f"array shape {self.voxels.shape} != dims {self.header.dims}")


@dataclass(frozen=True)
class AttenuationVolume:
    dims: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    mu: np.ndarray  # float64, mm^-1

    def __post_init__(self):
        if tuple(self.mu.shape) != tuple(self.dims):
            raise ValueError(f"mu shape {self.mu.shape} != dims {self.dims}")

    @classmethod
    def from_array(cls, mu, spacing_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> "AttenuationVolume":
        mu = np.asarray(mu, dtype=np.float64)
        if mu.ndim != 3:
            raise ValueError("mu must be 3-D")
        if np.any(mu < 0):
            raise ValueError("attenuation must be non-negative")
        return cls(tuple(int(n) for n in mu.shape), tuple(float(s) for s in spacing_mm), mu)


def validate_metadata(header: VolumeHeader, data_size: Optional[int] = None) -> ValidationReport:
    """Run every header check and collect all failures.

    ``data_size`` is the payload length in bytes; the size check is skipped
    when it is not known.
    """
    report = ValidationReport()
    if any(n < 1 for n in header.dims):
        report.add("dims", f"all dims must be >= 1, got {list(header.dims)}")
    if any(not (s > 0) for s in header.spacing_mm):
        report.add("spacing", f"all spacing values must be > 0, got {list(header.spacing_mm)}")
    m = np.asarray(header.orientation, dtype=np.float64)
    if not np.all(np.isfinite(m)) or np.max(np.abs(m.T @ m - np.eye(3))) > ORTHO_TOL:
        report.add("orientation", "direction cosines are not orthonormal")
    if header.dtype not in SUPPORTED_DTYPES:
        report.add("dtype", f"unsupported dtype {header.dtype!r}")
    if header.byte_order not in SUPPORTED_BYTE_ORDERS:
        report.add("byte_order", f"unsupported byte order {header.byte_order!r}")
    if data_size is not None and all(n >= 1 for n in header.dims):
        expected = header.n_voxels * 2
        if data_size != expected:
            report.add("size", f"data file has {data_size} bytes, expected {expected}")
    return report


def read_header(header_path) -> VolumeHeader:
    try:
        raw = json.loads(Path(header_path).read_text())
    except FileNotFoundError:
        raise MalformedHeaderError(f"header not found: {header_path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"cannot parse {header_path}: {exc}") from None
    if not isinstance(raw, dict):
        raise MalformedHeaderError("header must be a JSON object")
    return VolumeHeader.from_dict(raw)


def load_volume(header_path) -> Volume3D:
    header_path = Path(header_path)
    header = read_header(header_path)
    data_file = header_path.parent / header.data_path
    try:
        payload = data_file.read_bytes()
    except OSError as exc:
        raise UnreadableDataError(f"{data_file}: {exc}") from None
    report = validate_metadata(header, len(payload))
    size_fail = [f for f in report.failures if f[0] == "size"]
    if size_fail:
        raise SizeMismatchError(size_fail[0][1])
    if not report.passed:
        raise InvalidMetadataError(report)
    voxels = np.frombuffer(payload, dtype="<i2").reshape(header.dims, order="F")
    return Volume3D(header, voxels.astype(np.int16))


def save_volume(volume: Volume3D, header_path, data_path: Optional[str] = None) -> Path:
    """Write header + payload; ``data_path`` defaults to ``<stem>.raw`` beside the header."""
    header_path = Path(header_path)
    rel = data_path or header_path.with_suffix(".raw").name
    header = VolumeHeader(**{**volume.header.__dict__, "data_path": rel})
    report = validate_metadata(header)
    if not report.passed:
        raise InvalidMetadataError(report)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(volume.voxels, dtype="<i2")
    (header_path.parent / rel).write_bytes(arr.tobytes(order="F"))
    header_path.write_text(json.dumps(header.to_dict(), indent=2) + "\n")
    return header_path


def hu_to_attenuation(v: Volume3D, mu_water: float = DEFAULT_MU_WATER) -> AttenuationVolume:
    if not mu_water > 0:
        raise ValueError(f"mu_water must be positive, got {mu_water}")
    hu = v.voxels.astype(np.float64)
    mu = np.maximum(0.0, mu_water * (1.0 + hu / 1000.0))
    return AttenuationVolume(tuple(v.header.dims), tuple(v.header.spacing_mm), mu)


def make_volume(voxels, spacing_mm=(1.0, 1.0, 1.0), orientation=None) -> Volume3D:
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError("voxels must be 3-D")
    if np.any(voxels < -32768) or np.any(voxels > 32767):
        raise ValueError("voxels out of int16 range")
    kwargs = {}
    if orientation is not None:
        kwargs["orientation"] = tuple(tuple(float(x) for x in r) for r in orientation)
    header = VolumeHeader(tuple(int(n) for n in voxels.shape), tuple(float(s) for s in spacing_mm), **kwargs)
    return Volume3D(header, voxels.astype(np.int16))
