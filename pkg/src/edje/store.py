"""On-disk caches for vision tokens, with exact storage accounting.

Two binary formats live here, both little-endian:

Feature store (adapter outputs), magic "EDJF":
    u32 version, then records: u32 id_len, id bytes, u32 m, u32 d,
    u16 width_bits, payload (m*d elements, row-major), u64 checksum.
    After the last record comes the manifest (u32 record count, then per
    record id_len/id/u64 offset/u32 m/u32 d/u16 width/u64 checksum) and
    finally the u64 manifest offset as the trailing 8 bytes.

Raw dump (pre-adapter vision tokens), magic "EDJR":
    u32 version, u32 record count, u32 tokens-per-image n, u32 width d,
    then records: u32 id_len, id bytes, payload (n*d float32).

The checksum is the first 8 bytes of SHA-256 over a record's header and
payload. Writers hold an exclusive ``<path>.lock`` file; readers refuse
to open while it exists, so any number of readers may share a store that
nobody is writing.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConflictError,
    ConfigError,
    CorruptionError,
    FormatError,
    NotFoundError,
)

STORE_MAGIC = b"EDJF"
DUMP_MAGIC = b"EDJR"
VERSION = 1

_WIDTH_DTYPES = {16: np.dtype("<f2"), 64: np.dtype("<f8")}


def storage_per_image(m: int, d: int, width_bits: int) -> int:
    """Exact payload bytes per image: m * d * width / 8. Metadata is
    excluded from the accounting."""
    if m <= 0 or d <= 0 or width_bits <= 0:
        raise ConfigError(f"storage arithmetic needs positive values, got {(m, d, width_bits)}")
    if width_bits % 8 != 0:
        raise ConfigError(f"width must be a whole number of bytes, got {width_bits} bits")
    return m * d * (width_bits // 8)


def decimal_kb(n_bytes: int) -> int:
    """Bytes to reported kilobytes under the decimal convention
    (1 kB = 1000 bytes), rounded to the nearest integer."""
    return round(n_bytes / 1000)


@dataclass
class StorageStats:
    bytes_per_image: int
    total_bytes: int
    token_count: int
    dtype: str

    @property
    def kb_per_image(self) -> float:
        return self.bytes_per_image / 1000

    def summary(self) -> str:
        return (
            f"tokens/image={self.token_count} dtype={self.dtype} "
            f"bytes/image={self.bytes_per_image} ({self.kb_per_image:.1f}kB decimal) "
            f"total={self.total_bytes}"
        )


@dataclass
class FeatureRecord:
    """One image's cached vision tokens plus identity metadata."""

    image_id: str
    m: int
    d: int
    width_bits: int
    payload: bytes

    @classmethod
    def from_tokens(cls, image_id: str, tokens: np.ndarray, width_bits: int = 16) -> "FeatureRecord":
        if width_bits not in _WIDTH_DTYPES:
            raise ConfigError(f"element width must be 16 or 64 bits, got {width_bits}")
        arr = np.ascontiguousarray(tokens, dtype=np.float64)
        if arr.ndim != 2:
            raise ConfigError(f"tokens must be a matrix, got shape {arr.shape}")
        # narrowing uses IEEE round-to-nearest-even via astype
        payload = arr.astype(_WIDTH_DTYPES[width_bits]).tobytes()
        return cls(image_id, arr.shape[0], arr.shape[1], width_bits, payload)

    def tokens(self) -> np.ndarray:
        """Stored values widened losslessly to float64, shape (m, d)."""
        flat = np.frombuffer(self.payload, dtype=_WIDTH_DTYPES[self.width_bits])
        return flat.astype(np.float64).reshape(self.m, self.d)

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)

    def _header_bytes(self) -> bytes:
        encoded = self.image_id.encode("utf-8")
        return struct.pack("<I", len(encoded)) + encoded + struct.pack(
            "<IIH", self.m, self.d, self.width_bits
        )

    def checksum(self) -> int:
        digest = hashlib.sha256(self._header_bytes() + self.payload).digest()
        return int.from_bytes(digest[:8], "little")

    def validate(self) -> None:
        expected = self.m * self.d * (self.width_bits // 8)
        if len(self.payload) != expected:
            raise FormatError(
                f"record {self.image_id!r}: payload is {len(self.payload)} bytes, "
                f"metadata implies {expected}"
            )


@dataclass
class _ManifestEntry:
    image_id: str
    offset: int
    m: int
    d: int
    width_bits: int
    checksum: int


class FeatureStoreWriter:
    """Append-only writer; the manifest and its offset land on close().

    Creation takes an exclusive lock file so readers cannot overlap a
    write in progress.
    """

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self._lock_path = self.path.with_name(self.path.name + ".lock")
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise ConflictError(f"store {self.path} is locked by another writer") from None
        self._fh = open(self.path, "wb")
        self._fh.write(STORE_MAGIC + struct.pack("<I", VERSION))
        self._entries: list[_ManifestEntry] = []
        self._ids: set[str] = set()
        self._closed = False

    def __enter__(self) -> "FeatureStoreWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def write_record(self, record: FeatureRecord) -> int:
        """Append one record; returns its byte offset in the file."""
        if record.image_id in self._ids:
            raise ConflictError(f"duplicate image id {record.image_id!r}")
        record.validate()
        offset = self._fh.tell()
        checksum = record.checksum()
        self._fh.write(record._header_bytes())
        self._fh.write(record.payload)
        self._fh.write(struct.pack("<Q", checksum))
        self._ids.add(record.image_id)
        self._entries.append(
            _ManifestEntry(record.image_id, offset, record.m, record.d, record.width_bits, checksum)
        )
        return offset

    def close(self) -> None:
        if self._closed:
            return
        manifest_offset = self._fh.tell()
        self._fh.write(struct.pack("<I", len(self._entries)))
        for e in self._entries:
            encoded = e.image_id.encode("utf-8")
            self._fh.write(struct.pack("<I", len(encoded)))
            self._fh.write(encoded)
            self._fh.write(struct.pack("<QIIHQ", e.offset, e.m, e.d, e.width_bits, e.checksum))
        self._fh.write(struct.pack("<Q", manifest_offset))
        self._fh.close()
        self._closed = True
        self._lock_path.unlink(missing_ok=True)


class FeatureStore:
    """Read-only view of a store file; safe for concurrent readers."""

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        lock = self.path.with_name(self.path.name + ".lock")
        if lock.exists():
            raise ConflictError(f"store {self.path} has an active writer")
        if not self.path.exists():
            raise NotFoundError(f"no feature store at {self.path}")
        self._fh = open(self.path, "rb")
        self._io_lock = threading.Lock()
        self._load_manifest()

    def _load_manifest(self) -> None:
        head = self._fh.read(8)
        if head[:4] != STORE_MAGIC:
            raise FormatError(f"{self.path}: bad magic at offset 0")
        (version,) = struct.unpack("<I", head[4:])
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported store version {version}")
        self._fh.seek(-8, os.SEEK_END)
        (manifest_offset,) = struct.unpack("<Q", self._fh.read(8))
        self._fh.seek(manifest_offset)
        try:
            (count,) = struct.unpack("<I", self._fh.read(4))
            self.entries: list[_ManifestEntry] = []
            self._by_id: dict[str, _ManifestEntry] = {}
            last_offset = -1
            for _ in range(count):
                (id_len,) = struct.unpack("<I", self._fh.read(4))
                image_id = self._fh.read(id_len).decode("utf-8")
                offset, m, d, width, checksum = struct.unpack("<QIIHQ", self._fh.read(26))
                if offset <= last_offset:
                    raise FormatError(f"{self.path}: manifest offsets not strictly increasing")
                last_offset = offset
                entry = _ManifestEntry(image_id, offset, m, d, width, checksum)
                self.entries.append(entry)
                self._by_id[image_id] = entry
        except struct.error as exc:
            raise FormatError(f"{self.path}: truncated manifest") from exc

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def __iter__(self):
        for e in self.entries:
            yield self.read_record(e.image_id)

    def read_record(self, image_id: str) -> FeatureRecord:
        entry = self._by_id.get(image_id)
        if entry is None:
            raise NotFoundError(f"image id {image_id!r} not in store {self.path}")
        with self._io_lock:
            self._fh.seek(entry.offset)
            try:
                (id_len,) = struct.unpack("<I", self._fh.read(4))
                stored_id = self._fh.read(id_len).decode("utf-8")
                m, d, width = struct.unpack("<IIH", self._fh.read(10))
                payload = self._fh.read(m * d * (width // 8))
                (stored_sum,) = struct.unpack("<Q", self._fh.read(8))
            except struct.error as exc:
                raise FormatError(
                    f"{self.path}: truncated record at offset {entry.offset}"
                ) from exc
        record = FeatureRecord(stored_id, m, d, width, payload)
        if stored_id != image_id or record.checksum() != stored_sum or stored_sum != entry.checksum:
            raise CorruptionError(
                f"record {image_id!r} at offset {entry.offset} failed checksum verification"
            )
        return record

    def stats(self) -> StorageStats:
        if not self.entries:
            return StorageStats(0, 0, 0, "none")
        first = self.entries[0]
        per_image = storage_per_image(first.m, first.d, first.width_bits)
        total = sum(storage_per_image(e.m, e.d, e.width_bits) for e in self.entries)
        return StorageStats(
            bytes_per_image=per_image,
            total_bytes=total,
            token_count=first.m,
            dtype=f"fp{first.width_bits}",
        )

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# raw (pre-adapter) vision-token dumps


def write_raw_dump(path: Path | str, records: list[tuple[str, np.ndarray]]) -> None:
    """Write a raw dump; every record must share the same (n, d) shape."""
    if records:
        n, d = records[0][1].shape
        for image_id, arr in records:
            if arr.shape != (n, d):
                raise ConfigError(
                    f"raw dump records must share one shape; {image_id!r} has {arr.shape}, expected {(n, d)}"
                )
    else:
        n = d = 0
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC + struct.pack("<IIII", VERSION, len(records), n, d))
        for image_id, arr in records:
            encoded = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class RawDump:
    """Pre-adapter vision tokens, one (n, d) float32 matrix per image."""

    def __init__(self, path: Path | str, ids: list[str], offsets: list[int], n: int, d: int):
        self.path = Path(path)
        self._ids = ids
        self._offsets = dict(zip(ids, offsets))
        self.tokens_per_image = n
        self.d_vision = d
        self._fh = open(self.path, "rb")
        self._io_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._ids)

    def ids(self) -> list[str]:
        return list(self._ids)

    def read(self, image_id: str) -> np.ndarray:
        """The image's token matrix, widened to float64, shape (n, d)."""
        offset = self._offsets.get(image_id)
        if offset is None:
            raise NotFoundError(f"image id {image_id!r} not in dump {self.path}")
        count = self.tokens_per_image * self.d_vision
        with self._io_lock:
            self._fh.seek(offset)
            raw = self._fh.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError(f"{self.path}: truncated payload at offset {offset}")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(
            self.tokens_per_image, self.d_vision
        )

    def __iter__(self):
        for image_id in self._ids:
            yield image_id, self.read(image_id)

    def close(self) -> None:
        self._fh.close()


def ingest_raw_dump(path: Path | str, d_vision: int | None = None) -> RawDump:
    """Open a raw dump and index its records.

    Validates the header and walks the record table; a malformed or
    truncated file raises FormatError naming the byte position.
    """
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no raw dump at {path}")
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:4] != DUMP_MAGIC:
            raise FormatError(f"{path}: bad or truncated header at offset 0")
        version, count, n, d = struct.unpack("<IIII", head[4:])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported dump version {version}")
        if d_vision is not None and count > 0 and d != d_vision:
            raise ConfigError(f"{path}: dump width {d} does not match configured {d_vision}")
        ids: list[str] = []
        offsets: list[int] = []
        at = 20
        for _ in range(count):
            fh.seek(at)
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise FormatError(f"{path}: truncated record header at offset {at}")
            (id_len,) = struct.unpack("<I", raw_len)
            image_id = fh.read(id_len)
            if len(image_id) != id_len:
                raise FormatError(f"{path}: truncated id at offset {at + 4}")
            payload_offset = at + 4 + id_len
            payload_end = payload_offset + 4 * n * d
            if payload_end > size:
                raise FormatError(f"{path}: truncated payload at offset {payload_offset}")
            ids.append(image_id.decode("utf-8"))
            offsets.append(payload_offset)
            at = payload_end
    return RawDump(path, ids, offsets, n, d)
