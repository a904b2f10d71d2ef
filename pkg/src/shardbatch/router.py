"""Router: the only client-facing entry point of the cluster."""

from __future__ import annotations

import logging
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import (
    AuthError,
    ClusterUnavailableError,
    InvalidArgumentError,
    MetadataUnavailableError,
    NodeDownError,
    PartialResultsError,
    ShardBatchError,
    StaleVersionError,
    TransportError,
    UnsupportedModeError,
)
from .model import Filter, InsertManyResult, ShardKey, ShardMap, WriteError
from .protocol import Connection, FramedServer

logger = logging.getLogger(__name__)

RETRY_BUDGET = 3


@dataclass
class RoutingCache:
    shardmap: ShardMap
    fetched_at: float = field(default_factory=time.time)


def _doc_key(raw):
    try:
        node_id, ts = raw["node_id"], raw["timestamp"]
    except (KeyError, TypeError):
        return None
    if not isinstance(node_id, str) or not isinstance(ts, int) or isinstance(ts, bool):
        return None
    return ShardKey(node_id, ts)


class Router:
    """Routing logic usable in-process or behind :class:`RouterServer`.

    Documents travel in wire form (plain dicts) so the router never
    re-validates metric payloads; shards do that.
    """

    def __init__(self, config_endpoints, cluster_token="", retry_budget=RETRY_BUDGET, timeout=60.0):
        if isinstance(config_endpoints, str):
            config_endpoints = [config_endpoints]
        self.config_endpoints = list(config_endpoints)
        self.cluster_token = cluster_token
        self.retry_budget = retry_budget
        self.timeout = timeout
        self._cache: dict[str, RoutingCache] = {}
        self._conns: dict[str, Connection] = {}
        self._conn_lock = threading.Lock()
        self._refresh_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=64, thread_name_prefix="router-fanout")

    # -- connections ------------------------------------------------------

    def _conn(self, endpoint) -> Connection:
        with self._conn_lock:
            conn = self._conns.get(endpoint)
            if conn is None or conn.closed:
                conn = Connection(endpoint, self.cluster_token)
                self._conns[endpoint] = conn
            return conn

    def _drop(self, endpoint):
        with self._conn_lock:
            conn = self._conns.pop(endpoint, None)
        if conn is not None:
            conn.close()

    def _shard_request(self, endpoint, type_, payload):
        for attempt in range(2):
            try:
                return self._conn(endpoint).request(type_, payload, timeout=self.timeout)
            except NodeDownError:
                # a pooled connection may have gone stale; one fresh attempt
                self._drop(endpoint)
                if attempt:
                    raise

    # -- metadata ---------------------------------------------------------

    def cached_map(self, collection) -> ShardMap | None:
        entry = self._cache.get(collection)
        return entry.shardmap if entry else None

    def refresh_map(self, collection) -> ShardMap:
        """Fetch a newer map from the config servers; keeps the cache if not modified."""
        with self._refresh_lock:
            current = self.cached_map(collection)
            known = current.version if current else 0
            last = None
            for endpoint in self.config_endpoints:
                try:
                    resp = self._conn(endpoint).request(
                        "get_shardmap", {"collection": collection, "known_version": known}, timeout=self.timeout
                    )
                except (NodeDownError, TransportError) as exc:
                    self._drop(endpoint)
                    last = exc
                    continue
                if resp.payload.get("not_modified"):
                    return current
                smap = ShardMap.from_wire(resp.payload["shardmap"]).validate()
                if current is None or smap.version >= current.version:
                    self._cache[collection] = RoutingCache(smap)
                    return smap
                return current
            raise MetadataUnavailableError(f"no config server reachable: {last}")

    def shardmap(self, collection) -> ShardMap:
        return self.cached_map(collection) or self.refresh_map(collection)

    # -- inserts ----------------------------------------------------------

    def insert_many(self, collection, docs, ordered=False) -> InsertManyResult:
        """Unordered bulk insert of wire-form documents.

        Errors carry the document's index in ``docs``; every document is
        either inserted or reported, so ``inserted_count + len(errors) ==
        len(docs)``.
        """
        if ordered:
            raise UnsupportedModeError("only ordered=false inserts are supported")
        result = InsertManyResult()
        if not docs:
            return result
        keys = {}
        for i, raw in enumerate(docs):
            key = _doc_key(raw)
            if key is None:
                result.errors.append(WriteError(i, "invalid_document", "document lacks node_id/timestamp"))
            else:
                keys[i] = key
        lock = threading.Lock()
        outcomes = {"down": set(), "reached": set()}

        def record(inserted, errors, shard=None, down=False):
            with lock:
                result.inserted_count += inserted
                result.errors.extend(errors)
                if shard is not None:
                    outcomes["down" if down else "reached"].add(shard)

        self._dispatch(collection, docs, list(keys), keys, record, attempt=0)
        if result.inserted_count == 0 and outcomes["down"] and not outcomes["reached"]:
            raise ClusterUnavailableError(f"no shard reachable: {sorted(outcomes['down'])}")
        result.errors.sort(key=lambda e: e.batch_index)
        return result

    def _dispatch(self, collection, docs, indices, keys, record, attempt):
        smap = self.shardmap(collection)
        groups = defaultdict(list)
        chunks_by_shard = defaultdict(dict)
        for i in indices:
            chunk = smap.chunk_for(keys[i])
            groups[chunk.owner_shard].append(i)
            chunks_by_shard[chunk.owner_shard][chunk.chunk_id] = chunk
        args = [
            (collection, smap, shard, idx, chunks_by_shard[shard], docs, keys, record, attempt)
            for shard, idx in groups.items()
        ]
        if attempt:
            # retries already run on a fan-out thread; nesting submissions could starve the pool
            for a in args:
                self._send_group(*a)
            return
        for fut in [self._pool.submit(self._send_group, *a) for a in args]:
            fut.result()

    def _send_group(self, collection, smap, shard, indices, chunks, docs, keys, record, attempt):
        endpoint = smap.shard_endpoints[shard]
        try:
            indices = self._drop_known_elsewhere(collection, smap, shard, indices, chunks, docs, keys, record)
            if not indices:
                return
            resp = self._shard_request(
                endpoint,
                "insert_batch",
                {
                    "collection": collection,
                    "map_version": smap.version,
                    "docs": [docs[i] for i in indices],
                    "chunks": [c.to_wire() for c in chunks.values()],
                },
            )
        except StaleVersionError:
            if attempt >= self.retry_budget:
                msg = f"shard map still stale after {self.retry_budget} retries"
                record(0, [WriteError(i, "routing_error", msg) for i in indices])
                return
            self.refresh_map(collection)
            self._dispatch(collection, docs, indices, keys, record, attempt + 1)
            return
        except (NodeDownError, TransportError) as exc:
            record(0, [WriteError(i, "shard_unavailable", f"{shard}: {exc}") for i in indices], shard, down=True)
            return
        except ShardBatchError as exc:
            record(0, [WriteError(i, exc.code, exc.message) for i in indices], shard)
            return
        sub = InsertManyResult.from_wire(resp.payload)
        record(sub.inserted_count, [WriteError(indices[e.batch_index], e.code, e.message) for e in sub.errors], shard)

    def _drop_known_elsewhere(self, collection, smap, shard, indices, chunks, docs, keys, record):
        """Filter out documents already stored on a previous owner of their chunk.

        Data is never migrated on split, so a doc_id can only be checked for
        uniqueness by asking every shard that held its range before.
        """
        by_prior = defaultdict(list)
        for i in indices:
            for prior in smap.chunk_for(keys[i]).prior_owners:
                if prior != shard:
                    by_prior[prior].append(i)
        if not by_prior:
            return indices
        dup = {}
        for prior, idx in by_prior.items():
            resp = self._shard_request(
                smap.shard_endpoints[prior],
                "insert_batch",
                {"collection": collection, "docs": [docs[i] for i in idx], "dry_run": True},
            )
            for e in InsertManyResult.from_wire(resp.payload).errors:
                if e.code == "duplicate_key":
                    dup[idx[e.batch_index]] = WriteError(idx[e.batch_index], e.code, e.message)
        if dup:
            record(0, list(dup.values()))
        return [i for i in indices if i not in dup]

    # -- finds ------------------------------------------------------------

    def find(self, collection, f: Filter):
        """Yield pages (lists of wire-form documents) matching ``f``.

        Pages are concatenated shard by shard with no global order.
        """
        f.validate()
        for attempt in range(self.retry_budget + 1):
            smap = self.shardmap(collection)
            streams = []
            try:
                for shard in sorted(smap.target_shards(f)):
                    streams.append((shard, *self._open_find(collection, smap, shard, f)))
            except StaleVersionError:
                for _, gen, _ in streams:
                    gen.close()
                if attempt == self.retry_budget:
                    raise
                self.refresh_map(collection)
                continue
            except BaseException:
                for _, gen, _ in streams:
                    gen.close()
                raise
            break
        for shard, gen, first in streams:
            try:
                if first:
                    yield first
                for env in gen:
                    if env.payload.get("docs"):
                        yield env.payload["docs"]
            except (NodeDownError, TransportError) as exc:
                for _, other, _ in streams:
                    other.close()
                raise PartialResultsError(f"shard {shard} failed mid-stream: {exc}", shard_id=shard) from None

    def _open_find(self, collection, smap, shard, f):
        endpoint = smap.shard_endpoints[shard]
        payload = {"collection": collection, "filter": f.to_wire(), "map_version": smap.version}
        for attempt in range(2):
            gen = None
            try:
                gen = self._conn(endpoint).stream("find", payload, timeout=self.timeout)
                first = next(gen, None)
                return gen, (first.payload.get("docs") if first else None)
            except NodeDownError as exc:
                if gen is not None:
                    gen.close()
                self._drop(endpoint)
                if attempt:
                    raise PartialResultsError(f"shard {shard} is down: {exc}", shard_id=shard) from None
            except TransportError as exc:
                raise PartialResultsError(f"shard {shard} timed out: {exc}", shard_id=shard) from None

    def find_docs(self, collection, f: Filter):
        for page in self.find(collection, f):
            yield from page

    def close(self):
        self._pool.shutdown(wait=False, cancel_futures=True)
        with self._conn_lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for conn in conns:
            conn.close()


class RouterServer(FramedServer):
    """Client-facing TCP front end.

    Clients need no cluster token; the router adds it on every upstream
    call. Only ``shutdown`` requires the token.
    """

    role = "router"
    require_token = False

    def __init__(self, config_endpoints, host="127.0.0.1", port=0, cluster_token="", **kw):
        super().__init__(host, port, cluster_token)
        self.router = Router(config_endpoints, cluster_token, **kw)

    def check_token(self, env):
        if env.type == "shutdown" and env.cluster_token != self.cluster_token:
            raise AuthError("shutdown requires the cluster token")

    def on_hello(self, env, responder):
        return "ack", {"role": self.role, "config_endpoints": self.router.config_endpoints}

    def on_get_shardmap(self, env, responder):
        smap = self.router.refresh_map(env.payload["collection"])
        return "ack", {"not_modified": False, "shardmap": smap.to_wire()}

    def on_insert_batch(self, env, responder):
        p = env.payload
        if "collection" not in p or not isinstance(p.get("docs", []), list):
            raise InvalidArgumentError("insert_batch needs a collection and a docs list")
        result = self.router.insert_many(p["collection"], p.get("docs", []), ordered=p.get("ordered", False))
        return "insert_batch_result", result.to_wire()

    def on_find(self, env, responder):
        p = env.payload
        f = Filter.from_wire(p.get("filter"))
        count = 0
        for page in self.router.find(p["collection"], f):
            responder.send("find_batch", {"docs": page})
            count += len(page)
        responder.send("end_of_results", {"count": count})

    def close(self):
        self.router.close()
