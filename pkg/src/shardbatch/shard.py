"""Shard server: owns one data directory and serves routers only."""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path

from .errors import NotFoundError, ShardBatchError, StaleVersionError
from .model import ChunkRange, Filter, MetricDocument, WriteError
from .protocol import FIND_PAGE_SIZE, Connection, FramedServer
from .storage import SEGMENT_MAX_BYTES, SegmentStore

logger = logging.getLogger(__name__)

SPLIT_THRESHOLD = 4096


class ShardServer(FramedServer):
    """Stores a subset of each collection under ``<data_dir>/<collection>/``.

    Only the owning shard ever splits a chunk, so a shard knows exactly
    which of its chunk ids have been split away. An insert routed through a
    retired chunk (or with a map older than the one the shard registered
    with) gets ``stale_version``; a find is stale when its map predates the
    shard's latest split, since the router might miss the new upper owner.
    """

    role = "shard"

    def __init__(
        self,
        shard_id: str,
        data_dir,
        host="127.0.0.1",
        port=0,
        cluster_token="",
        config_endpoint: str | None = None,
        split_threshold: int = SPLIT_THRESHOLD,
        segment_max_bytes: int = SEGMENT_MAX_BYTES,
        fsync: bool = True,
        hang_on_shutdown: bool = False,
    ):
        super().__init__(host, port, cluster_token)
        self.shard_id = shard_id
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.config_endpoint = config_endpoint
        self.split_threshold = split_threshold
        self.segment_max_bytes = segment_max_bytes
        self.fsync = fsync
        self.hang_on_shutdown = hang_on_shutdown
        self.stores: dict[str, SegmentStore] = {}
        self.known_versions: dict[str, int] = {}
        self.floor_versions: dict[str, int] = {}
        self.retired: dict[str, set] = {}
        self._lock = threading.Lock()
        self._split_lock = threading.Lock()
        self._config_conn = None
        for sub in sorted(self.data_dir.iterdir()):
            if (sub / "MANIFEST").exists():
                self._open_store(sub.name, ())

    def _open_store(self, collection, index_fields):
        store = self.stores.get(collection)
        if store is None:
            store = SegmentStore(
                self.data_dir / collection,
                collection,
                index_fields,
                segment_max_bytes=self.segment_max_bytes,
                fsync=self.fsync,
            )
            self.stores[collection] = store
        for f in index_fields:
            store.create_index(f)
        return store

    def store(self, collection) -> SegmentStore:
        try:
            return self.stores[collection]
        except KeyError:
            raise NotFoundError(f"shard {self.shard_id} has no collection {collection!r}") from None

    def _learn_version(self, collection, version, floor=False):
        with self._lock:
            if version > self.known_versions.get(collection, 0):
                self.known_versions[collection] = version
            if floor and version > self.floor_versions.get(collection, 0):
                self.floor_versions[collection] = version

    def _check_version(self, collection, map_version, chunk_ids=None):
        if map_version is None:
            return
        if chunk_ids is None:
            known = self.known_versions.get(collection, 0)
        else:
            known = self.floor_versions.get(collection, 0)
            if self.retired.get(collection, set()).intersection(chunk_ids):
                known = max(known, self.known_versions.get(collection, 0))
        if map_version < known:
            raise StaleVersionError(f"map version {map_version} is older than {known}", version=known)

    # -- config server interaction ----------------------------------------

    def _config(self) -> Connection:
        if self._config_conn is None or self._config_conn.closed:
            self._config_conn = Connection(self.config_endpoint, self.cluster_token)
        return self._config_conn

    def register(self):
        """Register with the config server and adopt the collections it reports."""
        resp = self._config().request(
            "register_shard",
            {"shard_id": self.shard_id, "endpoint": self.endpoint, "data_path": str(self.data_dir)},
        )
        for name, smap in resp.payload.get("collections", {}).items():
            with self._lock:
                self._open_store(name, smap.get("index_fields", ()))
            self._learn_version(name, smap["version"], floor=True)
        return resp.payload

    def maybe_split(self, collection, chunk: ChunkRange):
        """Report a median split of ``chunk`` to the config server once it is too big.

        Returns the split key, or None when the chunk stays whole.
        """
        if chunk.owner_shard != self.shard_id:
            return None
        point = self.store(collection).split_point(chunk.lo, chunk.hi, self.split_threshold)
        if point is None:
            return None
        split_key, lower, upper = point
        if self.config_endpoint is None:
            return split_key
        try:
            resp = self._config().request(
                "report_split",
                {
                    "collection": collection,
                    "chunk_id": chunk.chunk_id,
                    "split_key": split_key.to_wire(),
                    "lower_count": lower,
                    "upper_count": upper,
                },
            )
        except StaleVersionError:
            return None
        except ShardBatchError as exc:
            logger.warning("shard %s could not report split of chunk %d: %s", self.shard_id, chunk.chunk_id, exc)
            return None
        with self._lock:
            self.retired.setdefault(collection, set()).add(chunk.chunk_id)
        self._learn_version(collection, resp.payload["shardmap"]["version"])
        return split_key

    # -- handlers ---------------------------------------------------------

    def on_hello(self, env, responder):
        return "ack", {
            "role": self.role,
            "shard_id": self.shard_id,
            "live_doc_count": {n: s.live_doc_count for n, s in self.stores.items()},
            "known_versions": dict(self.known_versions),
        }

    def on_create_collection(self, env, responder):
        smap = env.payload["shardmap"]
        with self._lock:
            self._open_store(smap["collection"], smap.get("index_fields", ()))
        self._learn_version(smap["collection"], smap["version"], floor=True)
        return "ack", {}

    def on_insert_batch(self, env, responder):
        p = env.payload
        collection = p["collection"]
        store = self.store(collection)
        try:
            chunk_ids = [c["chunk_id"] for c in p["chunks"]] if "chunks" in p else None
            self._check_version(collection, p.get("map_version"), chunk_ids)
        except StaleVersionError as exc:
            return "stale_version", {"version": exc.details["version"]}
        docs, bodies, errors = [], [], []
        positions = []
        for i, raw in enumerate(p.get("docs", [])):
            try:
                doc = MetricDocument.from_wire(raw)
            except ShardBatchError as exc:
                errors.append(WriteError(i, "invalid_document", exc.message))
                continue
            positions.append(i)
            docs.append(doc)
            bodies.append(json.dumps(raw, separators=(",", ":")).encode())
        if p.get("dry_run"):
            # probe only: report which documents already exist here
            for pos, doc in zip(positions, docs):
                if store.contains(doc.doc_id):
                    errors.append(WriteError(pos, "duplicate_key", f"duplicate doc_id {doc.doc_id.hex()}"))
            errors.sort(key=lambda e: e.batch_index)
            return "insert_batch_result", {"inserted_count": 0, "errors": [e.to_wire() for e in errors]}
        inserted, store_errors = store.insert_many(docs, bodies)
        errors.extend(WriteError(positions[e.batch_index], e.code, e.message) for e in store_errors)
        errors.sort(key=lambda e: e.batch_index)
        if p.get("chunks"):
            with self._split_lock:
                for c in p["chunks"]:
                    self.maybe_split(collection, ChunkRange.from_wire(c))
        return "insert_batch_result", {
            "inserted_count": len(inserted),
            "errors": [e.to_wire() for e in errors],
        }

    def on_find(self, env, responder):
        p = env.payload
        collection = p["collection"]
        store = self.store(collection)
        f = Filter.from_wire(p["filter"])
        try:
            self._check_version(collection, p.get("map_version"))
        except StaleVersionError as exc:
            return "stale_version", {"version": exc.details["version"]}
        rids = store.find_rids(f)
        sent = False
        for start in range(0, len(rids), FIND_PAGE_SIZE):
            responder.send_raw_docs([store.read_raw(r) for r in rids[start:start + FIND_PAGE_SIZE]])
            sent = True
        if not sent:
            responder.send("find_batch", {"docs": []})
        responder.send("end_of_results", {"count": len(rids)})

    def on_shutdown(self, env, responder):
        if self.hang_on_shutdown:
            logger.warning("shard %s ignoring shutdown (test hook)", self.shard_id)
            return "ack", {"role": self.role, "hung": True}
        return super().on_shutdown(env, responder)

    def close(self):
        if self._config_conn is not None:
            self._config_conn.close()
        for store in self.stores.values():
            store.close()
