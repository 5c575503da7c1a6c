"""FMEB v1: the binary embedding-file format shared by every tool here.

Layout (all integers little-endian):

    magic   4 bytes  b"FMEB"
    version u16      1
    dim     u32
    class_count u32
    per class: name_len u16 + UTF-8 name bytes
    record_count u64
    per record: class_index u32 + dim * float32

Prompt files are ordinary FMEB files with one record per class. Parsing is
strict: every failure mode raises a distinct error naming the byte offset,
and a truncated file never yields partial data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import EmbeddingDataset

MAGIC = b"FMEB"
VERSION = 1


class FmebError(ValueError):
    """Malformed FMEB file; offset is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FmebMagicError(FmebError):
    pass


class FmebVersionError(FmebError):
    pass


class FmebTruncationError(FmebError):
    pass


class FmebDimensionError(FmebError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FmebTruncationError(f"file ends inside {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def write_fmeb(dataset: EmbeddingDataset, path) -> None:
    """Serialize a dataset; float64 values are stored as float32."""
    dataset.validate()
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(struct.pack("<I", dataset.dim))
    parts.append(struct.pack("<I", len(dataset.class_names)))
    for name in dataset.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"class name too long: {name[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<Q", len(dataset.records)))
    for class_index, vec in dataset.records:
        parts.append(struct.pack("<I", class_index))
        parts.append(np.asarray(vec, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_fmeb(path, expected_dim: int | None = None) -> EmbeddingDataset:
    """Parse an FMEB file back into a dataset (values come back float64,
    exactly the float32 stored on disk).

    expected_dim cross-checks the header dimension against what the caller
    needs (e.g. a prompts file must match its images file).
    """
    r = _Reader(Path(path).read_bytes())

    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FmebMagicError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u16("version")
    if version != VERSION:
        raise FmebVersionError(f"unsupported version {version}", 4)
    dim_offset = r.offset
    dim = r.u32("dimension")
    if dim == 0:
        raise FmebDimensionError("dimension must be positive", dim_offset)
    if expected_dim is not None and dim != expected_dim:
        raise FmebDimensionError(f"dimension {dim} does not match expected {expected_dim}", dim_offset)

    class_count = r.u32("class count")
    class_names = []
    for i in range(class_count):
        name_len = r.u16(f"class name length #{i}")
        name_offset = r.offset
        raw = r.take(name_len, f"class name #{i}")
        try:
            class_names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FmebError(f"class name #{i} is not valid UTF-8: {e}", name_offset) from e

    record_count = r.u64("record count")
    records = []
    for i in range(record_count):
        idx_offset = r.offset
        class_index = r.u32(f"record #{i} class index")
        if class_index >= class_count:
            raise FmebError(
                f"record #{i} class index {class_index} out of range (classes: {class_count})",
                idx_offset,
            )
        raw = r.take(4 * dim, f"record #{i} values")
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        records.append((class_index, vec))

    if r.offset != len(r.data):
        raise FmebError(f"{len(r.data) - r.offset} trailing bytes after last record", r.offset)

    return EmbeddingDataset(dim=dim, class_names=class_names, records=records)
