"""Append-only segment storage with in-memory secondary indexes.

Directory layout::

    <dir>/MANIFEST      one JSON object: collection, index_fields, sealed_segments
    <dir>/seg-<n>.log   records: >I body length, >I crc32(body), JSON body

Records are never rewritten. A segment is sealed once it reaches
``segment_max_bytes``. Indexes live in memory only and are rebuilt from the
segments on open.
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import threading
import zlib
from pathlib import Path

from sortedcontainers import SortedDict, SortedList

from .errors import InvalidArgumentError, RecoveryError, StorageError
from .model import INDEXABLE_FIELDS, Filter, MetricDocument, ShardKey, WriteError

logger = logging.getLogger(__name__)

RECORD_HEADER = struct.Struct(">II")
SEGMENT_MAX_BYTES = 64 * 1024 * 1024
_SEG_RE = re.compile(r"^seg-(\d+)\.log$")


class SecondaryIndex:
    """Ordered map from field value to the record ids holding it."""

    def __init__(self, field):
        if field not in INDEXABLE_FIELDS:
            raise InvalidArgumentError(f"cannot index field {field!r}; choose from {INDEXABLE_FIELDS}")
        self.field = field
        self.entries = SortedDict()
        self._count = 0

    def add(self, value, rid):
        bucket = self.entries.get(value)
        if bucket is None:
            self.entries[value] = [rid]
        else:
            bucket.append(rid)
        self._count += 1

    def lookup(self, value):
        return self.entries.get(value, ())

    def scan(self, lo=None, hi=None):
        """Record ids with ``lo <= value < hi`` in ascending value order."""
        for value in self.entries.irange(lo, hi, inclusive=(True, False)):
            yield from self.entries[value]

    def __len__(self):
        return self._count


def _key_tuple(key: ShardKey):
    return (key.node_id, key.timestamp)


class SegmentStore:
    def __init__(
        self,
        dir,
        collection: str = "",
        index_fields=(),
        segment_max_bytes: int = SEGMENT_MAX_BYTES,
        fsync: bool = True,
    ):
        self.dir = Path(dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.collection = collection
        self.segment_max_bytes = segment_max_bytes
        self.fsync = fsync
        self.sealed: list[int] = []
        self.indexes: dict[str, SecondaryIndex] = {}

        self._wlock = threading.Lock()  # single writer
        self._ilock = threading.Lock()  # guards in-memory structures
        self._fds: dict[int, int] = {}
        self._locators: list[tuple[int, int, int]] = []  # (segment, offset, length)
        self._node: list[str] = []
        self._ts: list[int] = []
        self._ids: dict[bytes, int] = {}
        self._keys = SortedList()

        self._recover(index_fields)

    # -- recovery ---------------------------------------------------------

    def _segment_path(self, n):
        return self.dir / f"seg-{n}.log"

    def _recover(self, index_fields):
        manifest = self.dir / "MANIFEST"
        declared = list(index_fields)
        if manifest.exists():
            info = json.loads(manifest.read_text())
            self.collection = self.collection or info.get("collection", "")
            for f in info.get("index_fields", []):
                if f not in declared:
                    declared.append(f)
            self.sealed = list(info.get("sealed_segments", []))
        segs = sorted(int(m.group(1)) for p in self.dir.iterdir() if (m := _SEG_RE.match(p.name)))
        for i, n in enumerate(segs):
            self._load_segment(n, last=(i == len(segs) - 1))
        self.active = segs[-1] if segs else 0
        if self.active in self.sealed:
            self.active += 1
        self._active_fd = self._open_fd(self.active)
        self._active_size = os.fstat(self._active_fd).st_size
        for f in declared:
            self._build_index(f)
        self._write_manifest()

    def _load_segment(self, n, last):
        path = self._segment_path(n)
        data = path.read_bytes()
        pos = 0
        while pos < len(data):
            torn = None
            if pos + RECORD_HEADER.size > len(data):
                torn = "truncated record header"
            else:
                length, crc = RECORD_HEADER.unpack_from(data, pos)
                start = pos + RECORD_HEADER.size
                end = start + length
                if end > len(data):
                    torn = "truncated record body"
                elif zlib.crc32(data[start:end]) != crc:
                    if not (last and end == len(data)):
                        raise RecoveryError(f"{path}: checksum mismatch at offset {pos}")
                    torn = "checksum mismatch in final record"
            if torn:
                if not last:
                    raise RecoveryError(f"{path}: {torn} at offset {pos} in a non-final segment")
                logger.warning("%s: %s at offset %d; truncating torn tail", path, torn, pos)
                with open(path, "r+b") as fh:
                    fh.truncate(pos)
                    fh.flush()
                    os.fsync(fh.fileno())
                break
            try:
                doc = MetricDocument.from_wire(json.loads(data[start:end]))
            except (ValueError, InvalidArgumentError) as exc:
                raise RecoveryError(f"{path}: unreadable record at offset {pos}: {exc}") from None
            self._index_record((n, start, length), doc)
            pos = end
        self._fds[n] = os.open(path, os.O_RDONLY)

    def _open_fd(self, n):
        fd = os.open(self._segment_path(n), os.O_RDWR | os.O_APPEND | os.O_CREAT, 0o644)
        old = self._fds.get(n)
        if old is not None:
            os.close(old)
        self._fds[n] = fd
        return fd

    def _write_manifest(self):
        info = {
            "collection": self.collection,
            "index_fields": list(self.indexes),
            "sealed_segments": self.sealed,
        }
        tmp = self.dir / "MANIFEST.tmp"
        tmp.write_text(json.dumps(info))
        os.replace(tmp, self.dir / "MANIFEST")

    # -- indexing ---------------------------------------------------------

    def _index_record(self, loc, doc: MetricDocument):
        rid = len(self._locators)
        self._locators.append(loc)
        self._node.append(doc.node_id)
        self._ts.append(doc.timestamp)
        self._ids[doc.doc_id] = rid
        self._keys.add((doc.node_id, doc.timestamp))
        for f, index in self.indexes.items():
            index.add(self._field_value(f, rid, doc.doc_id), rid)
        return rid

    def _field_value(self, f, rid, doc_id=None):
        if f == "timestamp":
            return self._ts[rid]
        if f == "node_id":
            return self._node[rid]
        return doc_id

    def _build_index(self, f):
        index = SecondaryIndex(f)
        ids_by_rid = None
        if f == "doc_id":
            ids_by_rid = {rid: d for d, rid in self._ids.items()}
        for rid in range(len(self._locators)):
            index.add(ids_by_rid[rid] if ids_by_rid else self._field_value(f, rid), rid)
        self.indexes[f] = index

    def create_index(self, f):
        if f not in INDEXABLE_FIELDS:
            raise InvalidArgumentError(f"cannot index field {f!r}; choose from {INDEXABLE_FIELDS}")
        with self._wlock, self._ilock:
            if f not in self.indexes:
                self._build_index(f)
                self._write_manifest()

    # -- writes -----------------------------------------------------------

    @property
    def live_doc_count(self) -> int:
        return len(self._locators)

    def contains(self, doc_id: bytes) -> bool:
        return doc_id in self._ids

    def insert_many(self, docs, encoded=None):
        """Append every document whose doc_id is new; never stops at an error.

        ``encoded`` optionally supplies the JSON body bytes for each document.
        Returns ``(inserted_positions, errors)``; the batch is flushed (and
        fsynced if enabled) before this returns.
        """
        errors = []
        accepted = []
        with self._wlock:
            seen = set()
            for i, doc in enumerate(docs):
                if doc.doc_id in self._ids or doc.doc_id in seen:
                    errors.append(WriteError(i, "duplicate_key", f"duplicate doc_id {doc.doc_id.hex()}"))
                    continue
                seen.add(doc.doc_id)
                body = encoded[i] if encoded is not None else _encode_doc(doc)
                accepted.append((i, doc, body))
            pending = []
            buf = bytearray()
            for i, doc, body in accepted:
                rec_len = RECORD_HEADER.size + len(body)
                if self._active_size + len(buf) + rec_len > self.segment_max_bytes and (self._active_size or buf):
                    self._flush(buf)
                    buf = bytearray()
                    self._seal()
                offset = self._active_size + len(buf) + RECORD_HEADER.size
                buf += RECORD_HEADER.pack(len(body), zlib.crc32(body))
                buf += body
                pending.append(((self.active, offset, len(body)), doc))
            self._flush(buf)
            with self._ilock:
                for loc, doc in pending:
                    self._index_record(loc, doc)
        return [i for i, _, _ in accepted], errors

    def _flush(self, buf):
        if not buf:
            return
        try:
            written = os.write(self._active_fd, buf)
            while written < len(buf):
                written += os.write(self._active_fd, memoryview(buf)[written:])
            if self.fsync:
                os.fsync(self._active_fd)
        except OSError as exc:
            raise StorageError(f"write to {self._segment_path(self.active)} failed: {exc}") from None
        self._active_size += len(buf)

    def _seal(self):
        if self.fsync:
            os.fsync(self._active_fd)
        self.sealed.append(self.active)
        self._write_manifest()
        self.active += 1
        self._active_fd = self._open_fd(self.active)
        self._active_size = 0

    # -- reads ------------------------------------------------------------

    def find_rids(self, f: Filter) -> list[int]:
        """Record ids matching ``f``, using the most selective declared index."""
        with self._ilock:
            n = len(self._locators)
            if f.node_ids is not None and "node_id" in self.indexes:
                idx = self.indexes["node_id"]
                cand = [rid for node in sorted(f.node_ids) for rid in idx.lookup(node)]
            elif (f.ts_lo is not None or f.ts_hi is not None) and "timestamp" in self.indexes:
                cand = list(self.indexes["timestamp"].scan(f.ts_lo, f.ts_hi))
            elif f.doc_id is not None:
                rid = self._ids.get(f.doc_id)
                cand = [] if rid is None else [rid]
            else:
                cand = range(n)
            node, ts = self._node, self._ts
            out = []
            for rid in cand:
                if f.node_ids is not None and node[rid] not in f.node_ids:
                    continue
                if f.ts_lo is not None and ts[rid] < f.ts_lo:
                    continue
                if f.ts_hi is not None and ts[rid] >= f.ts_hi:
                    continue
                out.append(rid)
        if f.doc_id is not None:
            wanted = self._ids.get(f.doc_id)
            out = [rid for rid in out if rid == wanted]
        return out

    def read_raw(self, rid: int) -> bytes:
        seg, offset, length = self._locators[rid]
        return os.pread(self._fds[seg], length, offset)

    def read(self, rid: int) -> MetricDocument:
        return MetricDocument.from_wire(json.loads(self.read_raw(rid)))

    def find(self, f: Filter):
        for rid in self.find_rids(f.validate()):
            yield self.read(rid)

    def all_docs(self):
        for rid in range(self.live_doc_count):
            yield self.read(rid)

    # -- chunk statistics -------------------------------------------------

    def _key_bounds(self, lo: ShardKey, hi: ShardKey):
        keys = self._keys
        i = 0 if lo.bound < 0 else (len(keys) if lo.bound > 0 else keys.bisect_left(_key_tuple(lo)))
        j = len(keys) if hi.bound > 0 else (0 if hi.bound < 0 else keys.bisect_left(_key_tuple(hi)))
        return i, max(i, j)

    def count_in_range(self, lo: ShardKey, hi: ShardKey) -> int:
        with self._ilock:
            i, j = self._key_bounds(lo, hi)
            return j - i

    def split_point(self, lo: ShardKey, hi: ShardKey, threshold: int):
        """Median key of the local documents in ``[lo, hi)`` once they exceed ``threshold``.

        Returns ``(split_key, lower_count, upper_count)`` or None when under
        the threshold or when every key in range is identical.
        """
        with self._ilock:
            keys = self._keys
            i, j = self._key_bounds(lo, hi)
            if j - i <= threshold:
                return None
            k = keys[i + (j - i) // 2]
            left = keys.bisect_left(k)
            if left == i:
                left = keys.bisect_right(keys[i])
                if left >= j:
                    return None
                k = keys[left]
            return ShardKey(*k), left - i, j - left

    def close(self):
        with self._wlock:
            if self.fsync and self._active_fd is not None:
                os.fsync(self._active_fd)
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()
            self._active_fd = None


def _encode_doc(doc: MetricDocument) -> bytes:
    return json.dumps(doc.to_wire(), separators=(",", ":")).encode()


def recover(dir, **kw) -> SegmentStore:
    """Reopen a store from its directory, truncating a torn trailing record."""
    return SegmentStore(dir, **kw)
