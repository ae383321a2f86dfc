"""Binary corpus format with an offset index for O(1) random access.

Layout (all little-endian):

``<name>.skgr``      header: magic ``SKGR`` (4s), format_version (u16),
                     num_records (u64), num_classes (u16), flags (u16);
                     then records back to back. Each record is
                     label_id (u16), num_nodes (u16), num_strokes (u16),
                     num_nodes x 3 float32 features, num_strokes x
                     (u16 start, u16 count) spans. Edges are not stored;
                     they are reconstructed from the spans.
``<name>.skgr.idx``  num_records u64 byte offsets, then a u32 CRC32 of
                     the complete data file.
``<name>.manifest``  category names, one per line (label_id order).
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .ingest import NUM_NODES, SketchGraph, _largest_remainder

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "FLAG_VARIANT_R",
    "FLAG_SYNTHETIC_TS",
    "CorpusHeader",
    "CorpusWriter",
    "CorpusReader",
    "ChecksumMismatch",
    "VersionMismatch",
    "IndexOutOfRange",
    "InvariantViolation",
    "write_corpus",
    "open_corpus",
    "split_corpus",
    "write_manifest",
]

log = logging.getLogger(__name__)

MAGIC = b"SKGR"
FORMAT_VERSION = 1
FLAG_VARIANT_R = 1
FLAG_SYNTHETIC_TS = 2

_HEADER = struct.Struct("<4sHQHH")
_RECORD_HEAD = struct.Struct("<HHH")


class ChecksumMismatch(IOError):
    """Stored CRC32 does not match the data file contents."""


class VersionMismatch(IOError):
    """Unknown magic or unsupported format version."""


class IndexOutOfRange(IndexError):
    """Record index outside [0, num_records)."""


class InvariantViolation(ValueError):
    """A graph failed its structural invariants; the record is refused."""


@dataclass
class CorpusHeader:
    format_version: int
    num_records: int
    num_classes: int
    flags: int

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.format_version, self.num_records, self.num_classes, self.flags)

    @classmethod
    def unpack(cls, raw: bytes) -> "CorpusHeader":
        magic, version, num_records, num_classes, flags = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise VersionMismatch(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"unsupported format version {version}")
        return cls(version, num_records, num_classes, flags)


def record_to_bytes(graph: SketchGraph) -> bytes:
    n = graph.num_nodes()
    spans = graph.stroke_spans
    head = _RECORD_HEAD.pack(graph.label_id, n, len(spans))
    feats = np.ascontiguousarray(graph.node_features, dtype="<f4").tobytes()
    span_arr = np.asarray(spans, dtype="<u2").tobytes()
    return head + feats + span_arr


def record_from_bytes(raw: bytes) -> SketchGraph:
    label_id, n, num_strokes = _RECORD_HEAD.unpack_from(raw, 0)
    off = _RECORD_HEAD.size
    feats = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=off).reshape(n, 3).copy()
    off += n * 12
    spans_flat = np.frombuffer(raw, dtype="<u2", count=num_strokes * 2, offset=off)
    spans = [(int(spans_flat[2 * i]), int(spans_flat[2 * i + 1])) for i in range(num_strokes)]
    graph = SketchGraph(node_features=feats, edges=np.empty((0, 2), np.int32), label_id=int(label_id), stroke_spans=spans)
    graph.edges = graph.derived_edges()
    return graph


def record_size(num_nodes: int, num_strokes: int) -> int:
    return _RECORD_HEAD.size + num_nodes * 12 + num_strokes * 4


class CorpusWriter:
    """Single-writer streaming corpus builder; offsets and CRC finalized on close."""

    def __init__(self, path: str | Path, num_classes: int, flags: int = 0):
        self.path = Path(path)
        self.num_classes = int(num_classes)
        self.flags = int(flags)
        self._fh = open(self.path, "wb")
        self._offsets: list[int] = []
        self._fh.write(CorpusHeader(FORMAT_VERSION, 0, self.num_classes, self.flags).pack())
        self._closed = False

    def __enter__(self) -> "CorpusWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._fh.close()

    def append(self, graph: SketchGraph) -> None:
        try:
            graph.validate(expected_nodes=NUM_NODES)
        except ValueError as exc:
            self._fh.close()
            raise InvariantViolation(str(exc)) from exc
        if not 0 <= graph.label_id < self.num_classes:
            self._fh.close()
            raise InvariantViolation(f"label_id {graph.label_id} outside 0..{self.num_classes - 1}")
        self._offsets.append(self._fh.tell())
        self._fh.write(record_to_bytes(graph))

    def close(self) -> CorpusHeader:
        if self._closed:
            raise RuntimeError("writer already closed")
        self._closed = True
        header = CorpusHeader(FORMAT_VERSION, len(self._offsets), self.num_classes, self.flags)
        self._fh.seek(0)
        self._fh.write(header.pack())
        self._fh.close()
        crc = _crc32_of(self.path)
        with open(self.path.with_suffix(self.path.suffix + ".idx"), "wb") as idx:
            idx.write(np.asarray(self._offsets, dtype="<u8").tobytes())
            idx.write(struct.pack("<I", crc))
        return header


def _crc32_of(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            crc = zlib.crc32(chunk, crc)
    return crc & 0xFFFFFFFF


def write_corpus(
    graphs: Iterable[SketchGraph],
    path: str | Path,
    num_classes: int,
    flags: int = 0,
) -> CorpusHeader:
    """Stream graphs into a new corpus file pair; returns the final header."""
    with CorpusWriter(path, num_classes=num_classes, flags=flags) as writer:
        for g in graphs:
            writer.append(g)
    # writer.close() already ran via __exit__; reopen header for the caller
    with open(path, "rb") as fh:
        return CorpusHeader.unpack(fh.read(_HEADER.size))


class CorpusReader:
    """Random-access reader over an immutable corpus file.

    The whole data file is held as one bytes object (records are small),
    so concurrent ``get`` calls share nothing mutable.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        idx_path = self.path.with_suffix(self.path.suffix + ".idx")
        if not self.path.exists() or not idx_path.exists():
            raise FileNotFoundError(f"corpus files missing: {self.path} / {idx_path}")
        raw_idx = idx_path.read_bytes()
        if len(raw_idx) < 4 or (len(raw_idx) - 4) % 8 != 0:
            raise ChecksumMismatch("index file has invalid length")
        stored_crc = struct.unpack("<I", raw_idx[-4:])[0]
        self._data = self.path.read_bytes()
        if zlib.crc32(self._data) & 0xFFFFFFFF != stored_crc:
            raise ChecksumMismatch(f"CRC32 mismatch for {self.path}")
        self.offsets = np.frombuffer(raw_idx[:-4], dtype="<u8")
        if len(self._data) < _HEADER.size:
            raise VersionMismatch("data file too short for header")
        self.header = CorpusHeader.unpack(self._data[: _HEADER.size])
        if self.header.num_records != len(self.offsets):
            raise ChecksumMismatch(
                f"header says {self.header.num_records} records, index has {len(self.offsets)}"
            )
        if len(self.offsets) and (
            self.offsets[0] != _HEADER.size or np.any(np.diff(self.offsets.astype(np.int64)) <= 0)
        ):
            raise ChecksumMismatch("index offsets are not strictly increasing from the header end")

    def __len__(self) -> int:
        return self.header.num_records

    def _record_bounds(self, i: int) -> tuple[int, int]:
        if not 0 <= i < len(self):
            raise IndexOutOfRange(f"record {i} outside 0..{len(self) - 1}")
        start = int(self.offsets[i])
        end = int(self.offsets[i + 1]) if i + 1 < len(self) else len(self._data)
        return start, end

    def raw_record(self, i: int) -> bytes:
        start, end = self._record_bounds(i)
        return self._data[start:end]

    def get(self, i: int) -> SketchGraph:
        return record_from_bytes(self.raw_record(i))

    def __iter__(self) -> Iterator[SketchGraph]:
        for i in range(len(self)):
            yield self.get(i)

    def labels(self) -> np.ndarray:
        """All label ids in record order, without decoding features."""
        out = np.empty(len(self), dtype=np.int64)
        for i in range(len(self)):
            start = int(self.offsets[i])
            out[i] = struct.unpack_from("<H", self._data, start)[0]
        return out

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256(self._data).hexdigest()


def open_corpus(path: str | Path) -> CorpusReader:
    return CorpusReader(path)


def write_manifest(path: str | Path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def split_corpus(
    reader: CorpusReader,
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified train/val/test index split.

    Within each class the indices are shuffled by a seeded PRNG and
    partitioned by largest-remainder rounding of the normalized ratios.
    Classes with fewer samples than split parts go entirely to train.
    """
    ratios_arr = np.asarray(ratios, dtype=np.float64)
    if ratios_arr.size != 3 or np.any(ratios_arr <= 0):
        raise ValueError("ratios must be three positive numbers")
    ratios_arr = ratios_arr / ratios_arr.sum()
    labels = reader.labels()
    rng = np.random.default_rng(seed)
    train: list[np.ndarray] = []
    val: list[np.ndarray] = []
    test: list[np.ndarray] = []
    for cls in range(reader.header.num_classes):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        if idx.size < 3:
            log.warning("class %d has only %d samples; all assigned to train", cls, idx.size)
            train.append(idx)
            continue
        sizes = _largest_remainder(idx.size, ratios_arr)
        a, b = int(sizes[0]), int(sizes[0] + sizes[1])
        train.append(idx[:a])
        val.append(idx[a:b])
        test.append(idx[b:])

    def cat(parts: list[np.ndarray]) -> np.ndarray:
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    return cat(train), cat(val), cat(test)
