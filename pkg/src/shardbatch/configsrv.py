"""Authoritative cluster metadata: shard registry, collections and chunk maps.

:class:`ClusterMetadata` is an immutable value; :func:`apply_mutation` is a
pure function producing the next value. :class:`ConfigStore` adds
persistence (snapshot + append-only mutation log) and a single-writer lock.
:class:`ConfigServer` exposes the store over the wire protocol and mirrors
every mutation to a standby before acknowledging it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    ConflictError,
    InvalidArgumentError,
    InvalidSplitError,
    MetadataUnavailableError,
    NodeDownError,
    NotFoundError,
    PreconditionError,
    ShardBatchError,
    StaleVersionError,
    TransportError,
)
from .model import INDEXABLE_FIELDS, KEY_MAX, KEY_MIN, ChunkRange, ShardKey, ShardMap
from .protocol import Connection, FramedServer

logger = logging.getLogger(__name__)

SNAPSHOT_EVERY = 128


def shard_sort_key(shard_id: str):
    """Natural ordering so that ``shard-2`` sorts before ``shard-10``."""
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", shard_id)]


@dataclass(frozen=True)
class ClusterMetadata:
    shards: dict = field(default_factory=dict)  # shard_id -> {"endpoint", "data_path"}
    collections: dict = field(default_factory=dict)  # name -> ShardMap
    next_chunk_id: int = 0
    version: int = 0

    def endpoints(self):
        return {sid: s["endpoint"] for sid, s in self.shards.items()}

    def chunk_totals(self):
        counts = {sid: 0 for sid in self.shards}
        for smap in self.collections.values():
            for c in smap.chunks:
                counts[c.owner_shard] = counts.get(c.owner_shard, 0) + 1
        return counts

    def least_loaded_shard(self, counts=None):
        counts = counts if counts is not None else self.chunk_totals()
        return min(self.shards, key=lambda sid: (counts.get(sid, 0), shard_sort_key(sid)))

    def to_wire(self):
        return {
            "version": self.version,
            "next_chunk_id": self.next_chunk_id,
            "shards": {sid: dict(self.shards[sid]) for sid in sorted(self.shards)},
            "collections": {n: self.collections[n].to_wire() for n in sorted(self.collections)},
        }

    @classmethod
    def from_wire(cls, obj):
        return cls(
            shards={sid: dict(s) for sid, s in obj["shards"].items()},
            collections={n: ShardMap.from_wire(m) for n, m in obj["collections"].items()},
            next_chunk_id=obj["next_chunk_id"],
            version=obj["version"],
        )

    def serialize(self) -> bytes:
        return json.dumps(self.to_wire(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


def _register_shard(meta, shard_id, endpoint, data_path):
    existing = meta.shards.get(shard_id)
    if existing is not None:
        if existing["endpoint"] != endpoint:
            raise ConflictError(
                f"shard {shard_id} already registered at {existing['endpoint']}", shard_id=shard_id
            )
        return meta
    version = meta.version + 1
    shards = {**meta.shards, shard_id: {"endpoint": endpoint, "data_path": data_path}}
    endpoints = {sid: s["endpoint"] for sid, s in shards.items()}
    collections = {
        n: replace(m, version=version, shard_endpoints=endpoints) for n, m in meta.collections.items()
    }
    return replace(meta, shards=shards, collections=collections, version=version)


def _create_collection(meta, name, index_fields):
    if not meta.shards:
        raise PreconditionError("no shards registered")
    if name in meta.collections:
        raise ConflictError(f"collection {name!r} already exists")
    bad = [f for f in index_fields if f not in INDEXABLE_FIELDS]
    if bad:
        raise InvalidArgumentError(f"unsupported index fields {bad}")
    version = meta.version + 1
    owner = meta.least_loaded_shard()
    chunk = ChunkRange(meta.next_chunk_id, KEY_MIN, KEY_MAX, owner)
    smap = ShardMap(version, name, (chunk,), meta.endpoints(), tuple(index_fields))
    return replace(
        meta,
        collections={**meta.collections, name: smap},
        next_chunk_id=meta.next_chunk_id + 1,
        version=version,
    )


def _report_split(meta, collection, chunk_id, split_key, lower_count=0, upper_count=0):
    smap = meta.collections.get(collection)
    if smap is None:
        raise NotFoundError(f"unknown collection {collection!r}")
    pos = next((i for i, c in enumerate(smap.chunks) if c.chunk_id == chunk_id), None)
    if pos is None:
        raise StaleVersionError(f"chunk {chunk_id} no longer exists", version=smap.version)
    parent = smap.chunks[pos]
    if not parent.lo < split_key < parent.hi:
        raise InvalidSplitError(f"split key {split_key!r} is not strictly inside chunk {chunk_id}")
    counts = meta.chunk_totals()
    # the parent's slot is taken over by the lower half; the upper half is the new chunk
    new_owner = meta.least_loaded_shard(counts)
    lower = ChunkRange(
        meta.next_chunk_id, parent.lo, split_key, parent.owner_shard, lower_count, parent.prior_owners
    )
    prior = sorted({*parent.prior_owners, parent.owner_shard} - {new_owner}, key=shard_sort_key)
    upper = ChunkRange(meta.next_chunk_id + 1, split_key, parent.hi, new_owner, upper_count, tuple(prior))
    version = meta.version + 1
    chunks = smap.chunks[:pos] + (lower, upper) + smap.chunks[pos + 1:]
    new_map = replace(smap, version=version, chunks=chunks)
    return replace(
        meta,
        collections={**meta.collections, collection: new_map},
        next_chunk_id=meta.next_chunk_id + 2,
        version=version,
    )


def apply_mutation(meta: ClusterMetadata, record: dict) -> ClusterMetadata:
    """Apply one logged mutation record; returns ``meta`` itself for no-ops."""
    op = record.get("op")
    if op == "register_shard":
        return _register_shard(meta, record["shard_id"], record["endpoint"], record.get("data_path", ""))
    if op == "create_collection":
        return _create_collection(meta, record["name"], list(record.get("index_fields", [])))
    if op == "report_split":
        return _report_split(
            meta,
            record["collection"],
            record["chunk_id"],
            ShardKey.from_wire(record["split_key"]),
            record.get("lower_count", 0),
            record.get("upper_count", 0),
        )
    raise InvalidArgumentError(f"unknown mutation {op!r}")


class ConfigStore:
    """Metadata state machine with optional on-disk persistence.

    Layout: ``<dir>/meta.snapshot`` holds the full metadata as JSON and
    ``<dir>/meta.log`` one JSON mutation per line since that snapshot. The
    snapshot is rewritten every ``snapshot_every`` mutations.
    """

    def __init__(self, data_dir: str | os.PathLike | None = None, snapshot_every: int = SNAPSHOT_EVERY, fsync: bool = True):
        self.dir = Path(data_dir) if data_dir is not None else None
        self.snapshot_every = snapshot_every
        self.fsync = fsync
        self._lock = threading.Lock()
        self._meta = ClusterMetadata()
        self._since_snapshot = 0
        self._log = None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._recover()
            self._log = open(self.dir / "meta.log", "a", encoding="utf-8")

    @property
    def meta(self) -> ClusterMetadata:
        return self._meta

    def _recover(self):
        snap = self.dir / "meta.snapshot"
        if snap.exists():
            self._meta = ClusterMetadata.from_wire(json.loads(snap.read_text()))
        log = self.dir / "meta.log"
        if not log.exists():
            return
        good_bytes = 0
        with open(log, "rb") as fh:
            for line in fh:
                if not line.endswith(b"\n"):
                    logger.warning("dropping torn trailing mutation in %s", log)
                    break
                record = json.loads(line)
                good_bytes += len(line)
                if record["version"] <= self._meta.version:
                    continue
                self._meta = apply_mutation(self._meta, record)
                self._since_snapshot += 1
        if good_bytes != log.stat().st_size:
            with open(log, "r+b") as fh:
                fh.truncate(good_bytes)

    def prepare(self, record: dict) -> ClusterMetadata:
        """Compute the metadata ``record`` would produce without committing it."""
        return apply_mutation(self._meta, record)

    def commit(self, record: dict, new_meta: ClusterMetadata):
        if new_meta is self._meta:
            return
        if self._log is not None:
            line = json.dumps({**record, "version": new_meta.version}, sort_keys=True)
            self._log.write(line + "\n")
            self._log.flush()
            if self.fsync:
                os.fsync(self._log.fileno())
        self._meta = new_meta
        self._since_snapshot += 1
        if self._log is not None and self._since_snapshot >= self.snapshot_every:
            self.snapshot()

    def mutate(self, record: dict) -> ClusterMetadata:
        with self._lock:
            new_meta = self.prepare(record)
            self.commit(record, new_meta)
            return new_meta

    def snapshot(self):
        if self.dir is None:
            return
        tmp = self.dir / "meta.snapshot.tmp"
        tmp.write_bytes(self._meta.serialize())
        with open(tmp, "rb") as fh:
            os.fsync(fh.fileno())
        os.replace(tmp, self.dir / "meta.snapshot")
        self._log.seek(0)
        self._log.truncate()
        self._log.flush()
        self._since_snapshot = 0

    # convenience wrappers mirroring the operation names
    def register_shard(self, shard_id, endpoint, data_path=""):
        return self.mutate({"op": "register_shard", "shard_id": shard_id, "endpoint": endpoint, "data_path": data_path})

    def create_collection(self, name, index_fields=("timestamp", "node_id")) -> ShardMap:
        meta = self.mutate({"op": "create_collection", "name": name, "index_fields": list(index_fields)})
        return meta.collections[name]

    def report_split(self, collection, chunk_id, split_key: ShardKey, lower_count=0, upper_count=0) -> ShardMap:
        meta = self.mutate(
            {
                "op": "report_split",
                "collection": collection,
                "chunk_id": chunk_id,
                "split_key": split_key.to_wire(),
                "lower_count": lower_count,
                "upper_count": upper_count,
            }
        )
        return meta.collections[collection]

    def get_shardmap(self, collection, known_version=0) -> ShardMap | None:
        """Current map, or None when ``known_version`` is already current."""
        smap = self._meta.collections.get(collection)
        if smap is None:
            raise NotFoundError(f"unknown collection {collection!r}")
        return smap if smap.version > known_version else None

    def close(self):
        if self._log is not None:
            self.snapshot()
            self._log.close()
            self._log = None


_MUTATIONS = ("register_shard", "create_collection", "report_split")


class ConfigServer(FramedServer):
    """Network front end of a :class:`ConfigStore`.

    The primary applies a mutation on its mirror before committing locally
    and acknowledging. A mirror accepts only forwarded mutations and serves
    reads.
    """

    role = "config"

    def __init__(self, data_dir, host="127.0.0.1", port=0, cluster_token="", mirror_endpoint=None, is_mirror=False, **kw):
        super().__init__(host, port, cluster_token)
        self.store = ConfigStore(data_dir, **kw)
        self.is_mirror = is_mirror
        self.mirror_endpoint = mirror_endpoint
        self._mirror_conn = None
        self._mirror_lock = threading.Lock()

    def _mirror_request(self, type_, payload):
        last = None
        with self._mirror_lock:
            for _ in range(2):
                try:
                    if self._mirror_conn is None or self._mirror_conn.closed:
                        self._mirror_conn = Connection(self.mirror_endpoint, self.cluster_token)
                    return self._mirror_conn.request(type_, {**payload, "mirrored": True}, timeout=30)
                except (NodeDownError, TransportError) as exc:
                    self._mirror_conn = None
                    last = exc
                except ShardBatchError as exc:
                    raise MetadataUnavailableError(f"mirror {self.mirror_endpoint} rejected {type_}: {exc}") from None
        raise MetadataUnavailableError(f"mirror {self.mirror_endpoint} unreachable: {last}")

    def _mutate(self, type_, env):
        payload = dict(env.payload)
        mirrored = payload.pop("mirrored", False)
        if self.is_mirror and not mirrored:
            raise PreconditionError("this config server is a mirror; send mutations to the primary")
        if not self.is_mirror and mirrored:
            raise PreconditionError("primary config server does not accept mirrored mutations")
        record = {"op": type_, **payload}
        with self.store._lock:
            new_meta = self.store.prepare(record)
            if new_meta is not self.store.meta and self.mirror_endpoint and not self.is_mirror:
                self._mirror_request(type_, payload)
            self.store.commit(record, new_meta)
        return new_meta

    def on_hello(self, env, responder):
        meta = self.store.meta
        return "ack", {
            "role": self.role,
            "mirror": self.is_mirror,
            "version": meta.version,
            "digest": meta.digest(),
            "shards": sorted(meta.shards, key=shard_sort_key),
            "collections": sorted(meta.collections),
        }

    def on_register_shard(self, env, responder):
        meta = self._mutate("register_shard", env)
        return "ack", {
            "version": meta.version,
            "collections": {n: m.to_wire() for n, m in meta.collections.items()},
        }

    def on_create_collection(self, env, responder):
        meta = self._mutate("create_collection", env)
        smap = meta.collections[env.payload["name"]]
        if not self.is_mirror:
            self._propagate(smap, meta)
        return "ack", {"shardmap": smap.to_wire()}

    def _propagate(self, smap, meta):
        for sid, shard in sorted(meta.shards.items()):
            try:
                with Connection(shard["endpoint"], self.cluster_token) as conn:
                    conn.request("create_collection", {"shardmap": smap.to_wire()}, timeout=30)
            except ShardBatchError as exc:
                logger.warning("could not propagate collection %s to %s: %s", smap.collection, sid, exc)

    def on_report_split(self, env, responder):
        meta = self._mutate("report_split", env)
        return "ack", {"shardmap": meta.collections[env.payload["collection"]].to_wire()}

    def on_get_shardmap(self, env, responder):
        p = env.payload
        smap = self.store.get_shardmap(p["collection"], p.get("known_version", 0))
        if smap is None:
            return "ack", {"not_modified": True}
        return "ack", {"not_modified": False, "shardmap": smap.to_wire()}

    def close(self):
        if self._mirror_conn is not None:
            self._mirror_conn.close()
        self.store.close()
