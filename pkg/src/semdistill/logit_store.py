"""Pre-stored, top-K compressed teacher probabilities.

Teacher outputs are computed once, reduced to their K largest probabilities
and written to a flat little-endian binary file. Training reads them back and
spreads the discarded mass uniformly over the other classes.

File layout (version 1)::

    header  32 bytes   "<4sIIIQBB6x"
                       magic "FDLS", version, class_count, top_k,
                       record_count, value dtype code, index dtype code
    record  8 + 8K     sample_id <u8, K x index <u4, K x value <f4

With ``value dtype code == 1`` values are stored as ``<f2`` and a record takes
``8 + 6K`` bytes.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from .errors import FormatError, ShapeError, StorageIOError

MAGIC = b"FDLS"
VERSION = 1
HEADER_STRUCT = struct.Struct("<4sIIIQBB6x")
HEADER_SIZE = HEADER_STRUCT.size

VALUE_F32, VALUE_F16 = 0, 1
INDEX_U32 = 0
_VALUE_DTYPES = {VALUE_F32: np.dtype("<f4"), VALUE_F16: np.dtype("<f2")}

SUM_TOL = 1e-5


@dataclass
class CompressedLogits:
    """Top-K slice of one teacher probability vector, largest first."""

    sample_id: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values)
        if self.indices.ndim != 1 or self.indices.shape != self.values.shape:
            raise ShapeError("indices and values must be 1-D sequences of equal length")
        if len(self.indices) == 0:
            raise ValueError("need at least one retained entry")

    @property
    def k(self) -> int:
        return len(self.indices)

    def validate(self, class_count: int) -> None:
        idx = self.indices.astype(np.int64)
        v = self.values.astype(np.float64)
        if not self.k < class_count:
            raise ValueError(f"K={self.k} must be smaller than C={class_count}")
        if idx.max() >= class_count:
            raise ValueError(f"class index {idx.max()} out of range for C={class_count}")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate class indices")
        if v.min() < 0 or v.max() > 1:
            raise ValueError("retained values must lie in [0, 1]")
        if v.sum() > 1 + SUM_TOL:
            raise ValueError(f"retained mass {v.sum()} exceeds 1")
        d = np.diff(v)
        if (d > 0).any() or ((d == 0) & (np.diff(idx) < 0)).any():
            raise ValueError("entries must be ordered by value desc, then index asc")

    def __eq__(self, other):
        if not isinstance(other, CompressedLogits):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and np.array_equal(self.indices, other.indices)
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class LogitStoreHeader:
    class_count: int
    top_k: int
    record_count: int = 0
    value_dtype: int = VALUE_F32
    index_dtype: int = INDEX_U32
    version: int = VERSION
    magic: bytes = MAGIC

    def __post_init__(self):
        if self.magic != MAGIC:
            raise FormatError(f"bad magic {self.magic!r}, expected {MAGIC!r}")
        if self.version != VERSION:
            raise FormatError(f"unsupported store version {self.version}")
        if not 1 <= self.top_k < self.class_count:
            raise FormatError(f"need 1 <= K < C, got K={self.top_k}, C={self.class_count}")
        if self.value_dtype not in _VALUE_DTYPES or self.index_dtype != INDEX_U32:
            raise FormatError(f"unknown dtype codes ({self.value_dtype}, {self.index_dtype})")

    @property
    def record_dtype(self) -> np.dtype:
        return record_dtype(self.top_k, self.value_dtype)

    @property
    def record_size(self) -> int:
        return self.record_dtype.itemsize

    def pack(self) -> bytes:
        return HEADER_STRUCT.pack(
            self.magic, self.version, self.class_count, self.top_k,
            self.record_count, self.value_dtype, self.index_dtype,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "LogitStoreHeader":
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes")
        magic, version, c, k, n, vdt, idt = HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        return cls(c, k, n, vdt, idt, version, magic)


def record_dtype(k: int, value_dtype: int = VALUE_F32) -> np.dtype:
    return np.dtype([
        ("sample_id", "<u8"),
        ("indices", "<u4", (k,)),
        ("values", _VALUE_DTYPES[value_dtype], (k,)),
    ])


def _check_probs(probs: np.ndarray, axis=-1) -> None:
    if probs.min() < 0 or probs.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    sums = probs.sum(axis=axis, dtype=np.float64)
    if np.abs(sums - 1).max() > SUM_TOL:
        raise ValueError(f"probabilities must sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")


def compress_topk(probs, k: int, sample_id: int = 0) -> CompressedLogits:
    """Keep the ``k`` largest probabilities; equal values go to the smaller index."""
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise ShapeError(f"expected a 1-D probability vector, got shape {probs.shape}")
    c = probs.shape[0]
    if not 1 <= k < c:
        raise ValueError(f"need 1 <= K < C, got K={k}, C={c}")
    _check_probs(probs)
    order = np.argsort(-probs, kind="stable")[:k]
    return CompressedLogits(sample_id, order.astype(np.uint32), probs[order])


def compress_topk_batch(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`compress_topk` returning ``(indices, values)`` arrays."""
    probs = np.asarray(probs)
    c = probs.shape[-1]
    if not 1 <= k < c:
        raise ValueError(f"need 1 <= K < C, got K={k}, C={c}")
    _check_probs(probs)
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    return order.astype(np.uint32), np.take_along_axis(probs, order, axis=-1)


def smooth_arrays(indices: np.ndarray, values: np.ndarray, class_count: int) -> np.ndarray:
    """Dense smoothed vectors from ``(..., K)`` indices and values (float64)."""
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    k = indices.shape[-1]
    if class_count == k:
        raise ValueError("C == K leaves no classes to receive the residual mass")
    if class_count < k:
        raise ValueError(f"K={k} exceeds C={class_count}")
    floor = (1.0 - values.sum(axis=-1, keepdims=True)) / (class_count - k)
    floor = np.maximum(floor, 0.0)
    out = np.broadcast_to(floor, indices.shape[:-1] + (class_count,)).copy()
    np.put_along_axis(out, indices, values, axis=-1)
    return out


def smooth(cl: CompressedLogits, class_count: int) -> np.ndarray:
    """Dense probability vector: retained entries as stored, the rest share what is left."""
    if class_count == cl.k:
        raise ValueError("C == K leaves no classes to receive the residual mass")
    cl.validate(class_count)
    return smooth_arrays(cl.indices, cl.values, class_count)


def teacher_probabilities(scores, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax of teacher scores, computed in float64, returned as float32."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(scores, dtype=np.float64) / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def write_store(path, header: LogitStoreHeader, records: Iterable[CompressedLogits]) -> int:
    """Write ``records`` after ``header``; returns the number of records written.

    ``header.record_count`` of 0 means "count as you go"; any other value must
    match the number of records supplied. The file appears atomically.
    """
    path = Path(path)
    rdt = header.record_dtype
    tmp = path.with_name(path.name + ".part")
    n = 0
    try:
        with open(tmp, "wb") as fh:
            fh.write(header.pack())
            buf = np.zeros(1, dtype=rdt)
            for rec in records:
                if rec.k != header.top_k:
                    raise FormatError(f"record {n} has K={rec.k}, header says K={header.top_k}")
                buf["sample_id"] = rec.sample_id
                buf["indices"] = rec.indices
                buf["values"] = rec.values
                fh.write(buf.tobytes())
                n += 1
            if header.record_count and header.record_count != n:
                raise FormatError(f"header announces {header.record_count} records, got {n}")
            fh.seek(0)
            fh.write(_with_count(header, n).pack())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageIOError(f"writing logit store {path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()
    return n


def write_store_arrays(path, header: LogitStoreHeader, sample_ids, indices, values) -> int:
    """Bulk variant of :func:`write_store` for already-compressed arrays."""
    rec = np.zeros(len(sample_ids), dtype=header.record_dtype)
    rec["sample_id"] = sample_ids
    rec["indices"] = indices
    rec["values"] = values
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_with_count(header, len(rec)).pack())
            fh.write(rec.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageIOError(f"writing logit store {path}: {exc}") from exc
    return len(rec)


def _with_count(header: LogitStoreHeader, n: int) -> LogitStoreHeader:
    return LogitStoreHeader(header.class_count, header.top_k, n, header.value_dtype, header.index_dtype)


@dataclass
class LogitStoreReader:
    """Re-iterable view over the records of a store file.

    Iteration streams records in chunks; :meth:`arrays` memory-maps the whole
    record block for random access.
    """

    path: Path
    header: LogitStoreHeader
    chunk: int = 4096

    def __len__(self):
        return self.header.record_count

    def __iter__(self) -> Iterator[CompressedLogits]:
        rdt = self.header.record_dtype
        with open(self.path, "rb") as fh:
            fh.seek(HEADER_SIZE)
            left = self.header.record_count
            while left:
                n = min(left, self.chunk)
                block = np.frombuffer(fh.read(n * rdt.itemsize), dtype=rdt)
                for row in block:
                    yield CompressedLogits(int(row["sample_id"]), row["indices"].copy(), row["values"].copy())
                left -= n

    def arrays(self) -> np.ndarray:
        if self.header.record_count == 0:
            return np.zeros(0, dtype=self.header.record_dtype)
        return np.memmap(self.path, dtype=self.header.record_dtype, mode="r",
                         offset=HEADER_SIZE, shape=(self.header.record_count,))


def read_store(path) -> tuple[LogitStoreHeader, LogitStoreReader]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
        size = path.stat().st_size
    except OSError as exc:
        raise StorageIOError(f"reading logit store {path}: {exc}") from exc
    header = LogitStoreHeader.unpack(raw)
    rsize = header.record_size
    expected = HEADER_SIZE + header.record_count * rsize
    if size < expected:
        complete = (size - HEADER_SIZE) // rsize
        offset = HEADER_SIZE + complete * rsize
        raise FormatError(
            f"{path}: truncated at byte offset {offset} (record {complete} of "
            f"{header.record_count} incomplete; file has {size} bytes, expected {expected})"
        )
    if size > expected:
        raise FormatError(f"{path}: {size - expected} trailing bytes after byte offset {expected}")
    return header, LogitStoreReader(path, header)


@dataclass
class StoreSummary:
    count: int
    bytes: int
    payload_bytes: int
    dense_bytes: int
    wall_time: float
    class_count: int
    top_k: int
    extra: dict = field(default_factory=dict)

    @property
    def compression_ratio(self) -> float:
        return self.dense_bytes / self.payload_bytes if self.payload_bytes else float("nan")


def dense_bytes_per_sample(class_count: int) -> int:
    return 4 * class_count


def extract_teacher_logits(
    teacher: Callable,
    images,
    sample_ids,
    k: int,
    temperature: float,
    path,
    batch_size: int = 256,
    value_dtype: int = VALUE_F32,
) -> StoreSummary:
    """Run ``teacher`` once over ``images`` and persist top-K probabilities.

    ``teacher`` maps a float tensor batch ``(B, ...)`` to scores ``(B, C)``.
    Records follow the order of ``images`` regardless of ``batch_size``.
    """
    images = np.asarray(images)
    sample_ids = np.asarray(sample_ids, dtype=np.uint64)
    if len(images) != len(sample_ids):
        raise ShapeError(f"{len(images)} images but {len(sample_ids)} sample ids")
    t0 = time.perf_counter()
    all_idx, all_val = [], []
    class_count = None
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size]))
            scores = np.asarray(torch.as_tensor(teacher(batch)).detach().cpu())
            if scores.ndim != 2 or scores.shape[0] != len(batch):
                raise ShapeError(f"teacher returned shape {scores.shape} for a batch of {len(batch)}")
            if class_count is None:
                class_count = scores.shape[1]
            elif scores.shape[1] != class_count:
                raise ShapeError(f"teacher output length {scores.shape[1]} != C={class_count}")
            idx, val = compress_topk_batch(teacher_probabilities(scores, temperature), k)
            all_idx.append(idx)
            all_val.append(val)
    if class_count is None:
        raise ValueError("cannot extract logits from an empty dataset")
    header = LogitStoreHeader(class_count, k, value_dtype=value_dtype)
    n = write_store_arrays(path, header, sample_ids, np.concatenate(all_idx), np.concatenate(all_val))
    wall = time.perf_counter() - t0
    return StoreSummary(
        count=n,
        bytes=Path(path).stat().st_size,
        payload_bytes=n * header.record_size,
        dense_bytes=n * dense_bytes_per_sample(class_count),
        wall_time=wall,
        class_count=class_count,
        top_k=k,
    )
