"""Binary embedding files and their JSON-lines metadata sidecars.

File layout (little-endian)::

    offset  size  field
    0       4     magic  b"EMB1"
    4       4     u32    version (1)
    8       8     u64    count
    16      4     u32    dim
    20      1     u8     dtype (0 = float32)
    21      7     zero padding
    28      ...   count * dim float32, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    DuplicateRowIndex,
    FormatError,
    MalformedRecord,
    NonFiniteValue,
    TruncatedFile,
    UnsupportedDtype,
    ValidationError,
    ZeroNormRow,
)

MAGIC = b"EMB1"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIQIB7x")
HEADER_SIZE = HEADER.size  # 28
NORM_TOL = 1e-4

# rows per read; bounds transient memory independently of count
_CHUNK_ROWS = 1024


@dataclass(frozen=True)
class EmbeddingMatrix:
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValidationError(f"expected a 2-d array, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            raise UnsupportedDtype(f"expected float32 rows, got {self.data.dtype}")
        if self.data.flags.writeable:
            self.data.flags.writeable = False

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return self.count

    @classmethod
    def from_array(cls, array, normalize: bool = False) -> "EmbeddingMatrix":
        data = np.array(array, dtype=np.float32, copy=True, order="C")
        if data.ndim != 2:
            raise ValidationError(f"expected a 2-d array, got shape {data.shape}")
        _check_finite(data, 0)
        if normalize:
            _normalize_rows(data, 0)
        return cls(data, normalized=normalize)


@dataclass
class RowMetadata:
    row_index: int
    tile_id: str
    slide_id: str
    source: str
    extra: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        record = {
            "row_index": self.row_index,
            "tile_id": self.tile_id,
            "slide_id": self.slide_id,
            "source": self.source,
        }
        if self.extra:
            record["extra"] = self.extra
        return json.dumps(record, sort_keys=True, ensure_ascii=False)


def _check_finite(block: np.ndarray, first_row: int) -> None:
    bad = ~np.isfinite(block).all(axis=1)
    if bad.any():
        raise NonFiniteValue(first_row + int(np.flatnonzero(bad)[0]))


def _normalize_rows(block: np.ndarray, first_row: int) -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", block, block, dtype=np.float64))
    zero = norms == 0.0
    if zero.any():
        raise ZeroNormRow(first_row + int(np.flatnonzero(zero)[0]))
    block /= norms[:, None].astype(np.float32)


def read_header(f) -> tuple[int, int]:
    raw = f.read(HEADER_SIZE)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"not an embedding file (magic {raw[:4]!r})")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile("header shorter than 28 bytes")
    magic, version, count, dim, dtype = HEADER.unpack(raw)
    if version != VERSION:
        raise BadMagic(f"unsupported embedding file version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"dtype code {dtype} is not supported (only 0 = float32)")
    if dim == 0:
        raise FormatError("header declares dim=0")
    return count, dim


def load_embeddings(path, normalize: bool = True, mmap: bool = False) -> EmbeddingMatrix:
    """Load an ``EMB1`` file.

    Rows are streamed into a preallocated array in fixed-size chunks, so the
    only memory beyond the result is one chunk of norms.  With ``mmap=True``
    and ``normalize=False`` the payload stays on disk behind a read-only
    memory map; validation still scans it chunk by chunk.
    """
    path = Path(path)
    with open(path, "rb") as f:
        count, dim = read_header(f)
        payload = count * dim * 4
        available = os.fstat(f.fileno()).st_size - HEADER_SIZE
        if available < payload:
            raise TruncatedFile(
                f"payload has {available} bytes, header requires {payload} "
                f"({count} rows x {dim})"
            )
        if mmap and not normalize and count > 0:
            data = np.memmap(f, dtype="<f4", mode="r", offset=HEADER_SIZE, shape=(count, dim))
            for start in range(0, count, _CHUNK_ROWS):
                _check_finite(data[start:start + _CHUNK_ROWS], start)
            return EmbeddingMatrix(data, normalized=False)

        data = np.empty((count, dim), dtype=np.float32)
        flat = memoryview(data.reshape(-1)).cast("B")
        for start in range(0, count, _CHUNK_ROWS):
            stop = min(start + _CHUNK_ROWS, count)
            view = flat[start * dim * 4:stop * dim * 4]
            if f.readinto(view) != len(view):
                raise TruncatedFile(f"payload ends inside row range [{start}, {stop})")
            block = data[start:stop]
            if block.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts
                block.byteswap(inplace=True)
            _check_finite(block, start)
            if normalize:
                _normalize_rows(block, start)
    return EmbeddingMatrix(data, normalized=normalize)


def write_embeddings(path, matrix) -> None:
    """Write rows as an ``EMB1`` file.  Accepts an EmbeddingMatrix or a 2-d array."""
    data = matrix.data if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix)
    if data.ndim != 2:
        raise ValidationError(f"expected a 2-d array, got shape {data.shape}")
    if data.dtype != np.float32:
        raise UnsupportedDtype(f"only float32 payloads are written, got {data.dtype}")
    count, dim = data.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, count, dim, DTYPE_F32))
        for start in range(0, count, _CHUNK_ROWS):
            f.write(np.ascontiguousarray(data[start:start + _CHUNK_ROWS], dtype="<f4").tobytes())


_REQUIRED = ("row_index", "tile_id", "slide_id", "source")


def load_metadata(path, expected_count: int) -> list[RowMetadata]:
    records: dict[int, RowMetadata] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedRecord(lineno, "record is not a JSON object")
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise MalformedRecord(lineno, f"missing keys {missing}")
            idx = obj["row_index"]
            if isinstance(idx, bool) or not isinstance(idx, int):
                raise MalformedRecord(lineno, "row_index must be an integer")
            if not 0 <= idx < expected_count:
                raise MalformedRecord(lineno, f"row_index {idx} outside [0, {expected_count})")
            for key in _REQUIRED[1:]:
                if not isinstance(obj[key], str):
                    raise MalformedRecord(lineno, f"{key} must be a string")
            extra = obj.get("extra", {})
            if not isinstance(extra, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in extra.items()
            ):
                raise MalformedRecord(lineno, "extra must map strings to strings")
            if idx in records:
                raise DuplicateRowIndex(f"row_index {idx} repeated at line {lineno}")
            records[idx] = RowMetadata(idx, obj["tile_id"], obj["slide_id"], obj["source"], dict(extra))
    if len(records) != expected_count:
        raise CountMismatch(f"{len(records)} metadata records for {expected_count} embeddings")
    return [records[i] for i in range(expected_count)]


def write_metadata(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
