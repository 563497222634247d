"""Trace, window and score-series types plus the binary trace file format.

On-disk layout of a trace file (all integers little-endian)::

    "SCTR" | version u8 = 1 | dtype u8 = 0 (f32) | reserved u16 = 0
    | sample_count u64 | sample_count x f32

Ground truth lives in a JSON sidecar next to the binary (``<path>.meta.json``)
so that a "blind" trace is simply a trace file without its sidecar.

Aligned blocks use a sibling format with magic "SCTM" and a ``rows u64 |
cols u64`` shape instead of the sample count.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

TRACE_MAGIC = b"SCTR"
BLOCK_MAGIC = b"SCTM"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_TRACE_HEADER = struct.Struct("<4sBBHQ")
_BLOCK_HEADER = struct.Struct("<4sBBHQQ")


class TraceFormatError(ValueError):
    """Raised for malformed trace, block or sidecar files."""


class ClassLabel(enum.IntEnum):
    C0 = 0  # not beginning of the CO
    C1 = 1  # beginning of the CO

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(2)
        v[int(self)] = 1.0
        return v


@dataclass(frozen=True)
class GroundTruth:
    starts: tuple[int, ...]
    plaintexts: tuple[bytes, ...]
    key: Optional[bytes] = None

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(int(s) for s in self.starts))
        object.__setattr__(self, "plaintexts", tuple(bytes(p) for p in self.plaintexts))
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ValueError("ground-truth starts must be strictly increasing")
        if self.plaintexts and len(self.plaintexts) != len(self.starts):
            raise ValueError("one plaintext per CO start is required")
        for p in self.plaintexts:
            if len(p) != 16:
                raise ValueError("plaintexts must be 16-byte blocks")
        if self.key is not None and len(self.key) != 16:
            raise ValueError("key must be a 16-byte block")


@dataclass(frozen=True)
class TraceMeta:
    sample_count: int
    profile_name: str
    rd_max: int = 0
    seed: int = 0
    truth: Optional[GroundTruth] = None


@dataclass(frozen=True, eq=False)
class Trace:
    samples: np.ndarray
    meta: TraceMeta

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("a trace needs a nonempty 1-D sample array")
        if self.meta.sample_count != samples.size:
            raise ValueError(
                f"meta.sample_count={self.meta.sample_count} but trace has {samples.size} samples"
            )
        truth = self.meta.truth
        if truth is not None and any(not 0 <= s < samples.size for s in truth.starts):
            raise ValueError("annotated start outside the trace")

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.samples, other.samples)

    @classmethod
    def from_samples(cls, samples, profile_name="unknown", rd_max=0, seed=0, truth=None) -> "Trace":
        samples = np.asarray(samples, dtype=np.float64)
        meta = TraceMeta(samples.size, profile_name, rd_max, seed, truth)
        return cls(samples, meta)

    def blind(self) -> "Trace":
        """Copy of this trace without ground truth."""
        meta = TraceMeta(self.meta.sample_count, self.meta.profile_name, self.meta.rd_max, self.meta.seed)
        return Trace(self.samples, meta)


@dataclass(frozen=True, eq=False)
class Window:
    values: np.ndarray
    origin: int
    label: Optional[ClassLabel] = None


@dataclass(frozen=True, eq=False)
class ScoreSeries:
    scores: np.ndarray
    stride: int
    window_size: int

    def __len__(self) -> int:
        return len(self.scores)

    def origins(self) -> np.ndarray:
        return np.arange(len(self.scores)) * self.stride


def window_count(length: int, n: int, s: int) -> int:
    return (length - n) // s + 1


def slice_windows(samples: np.ndarray, n: int, s: int) -> np.ndarray:
    """Strided read-only view of shape (count, n); window i starts at i*s."""
    samples = np.asarray(samples)
    if s < 1:
        raise ValueError("stride must be >= 1")
    if not 1 <= n <= samples.size:
        raise ValueError(f"window size {n} does not fit a trace of {samples.size} samples")
    view = np.lib.stride_tricks.sliding_window_view(samples, n)
    return view[::s]


def slice(trace: Trace, n: int, s: int) -> list[Window]:
    rows = slice_windows(trace.samples, n, s)
    return [Window(row, i * s) for i, row in enumerate(rows)]


# -- file I/O ---------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def _check_finite(values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite sample cannot be stored")


def _write_sidecar(path, meta: TraceMeta):
    doc = {"profile_name": meta.profile_name, "rd_max": meta.rd_max, "seed": meta.seed}
    if meta.truth is not None:
        doc["starts"] = list(meta.truth.starts)
        doc["plaintexts"] = [p.hex() for p in meta.truth.plaintexts]
        if meta.truth.key is not None:
            doc["key"] = meta.truth.key.hex()
    with open(sidecar_path(path), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _read_sidecar(path) -> Optional[dict]:
    p = sidecar_path(path)
    if not p.exists():
        return None
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"malformed sidecar {p}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("profile_name"), str):
        raise TraceFormatError(f"sidecar {p} lacks a profile_name")
    return doc


def _truth_from_doc(doc: dict) -> Optional[GroundTruth]:
    if not any(k in doc for k in ("starts", "plaintexts", "key")):
        return None
    try:
        key = bytes.fromhex(doc["key"]) if doc.get("key") is not None else None
        pts = tuple(bytes.fromhex(h) for h in doc.get("plaintexts", []))
        return GroundTruth(tuple(int(s) for s in doc.get("starts", [])), pts, key)
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(f"malformed ground truth: {exc}") from exc


def _meta_from_doc(doc: Optional[dict], count: int) -> TraceMeta:
    if doc is None:
        return TraceMeta(count, "unknown")
    try:
        return TraceMeta(count, doc["profile_name"], int(doc.get("rd_max", 0)),
                         int(doc.get("seed", 0)), _truth_from_doc(doc))
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(f"malformed sidecar: {exc}") from exc


def write_trace(trace: Trace, path) -> None:
    _check_finite(trace.samples)
    payload = trace.samples.astype("<f4")
    header = _TRACE_HEADER.pack(TRACE_MAGIC, FORMAT_VERSION, DTYPE_F32, 0, payload.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    _write_sidecar(path, trace.meta)


def _read_header(fh, fmt: struct.Struct, magic: bytes, path):
    raw = fh.read(fmt.size)
    if len(raw) != fmt.size:
        raise TraceFormatError(f"{path}: truncated header")
    fields = fmt.unpack(raw)
    if fields[0] != magic:
        raise TraceFormatError(f"{path}: bad magic {fields[0]!r}")
    if fields[1] != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported version {fields[1]}")
    if fields[2] != DTYPE_F32:
        raise TraceFormatError(f"{path}: unsupported dtype {fields[2]}")
    return fields[4:]


def _read_payload(fh, count: int, path) -> np.ndarray:
    data = fh.read()
    if len(data) != 4 * count:
        raise TraceFormatError(f"{path}: payload holds {len(data)} bytes, header promises {4 * count}")
    return np.frombuffer(data, dtype="<f4").astype(np.float64)


def read_trace(path) -> Trace:
    with open(path, "rb") as fh:
        (count,) = _read_header(fh, _TRACE_HEADER, TRACE_MAGIC, path)
        samples = _read_payload(fh, count, path)
    if count == 0:
        raise TraceFormatError(f"{path}: empty trace")
    meta = _meta_from_doc(_read_sidecar(path), count)
    try:
        return Trace(samples, meta)
    except ValueError as exc:
        raise TraceFormatError(f"{path}: {exc}") from exc


def write_block(segments: np.ndarray, path, meta: Optional[TraceMeta] = None) -> None:
    """Write an M x L matrix of aligned segments; ``meta`` goes to the sidecar."""
    segments = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    _check_finite(segments)
    rows, cols = segments.shape
    with open(path, "wb") as fh:
        fh.write(_BLOCK_HEADER.pack(BLOCK_MAGIC, FORMAT_VERSION, DTYPE_F32, 0, rows, cols))
        fh.write(segments.astype("<f4").tobytes())
    if meta is not None:
        _write_sidecar(path, meta)


def read_block(path) -> tuple[np.ndarray, Optional[TraceMeta]]:
    with open(path, "rb") as fh:
        rows, cols = _read_header(fh, _BLOCK_HEADER, BLOCK_MAGIC, path)
        data = _read_payload(fh, rows * cols, path)
    doc = _read_sidecar(path)
    meta = None
    if doc is not None:
        meta = _meta_from_doc(doc, rows * cols)
    return data.reshape(rows, cols), meta


def trace_paths(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.sctr"))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path

