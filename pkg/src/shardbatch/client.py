"""Application-side client. Talks to routers only, never to shards."""

from __future__ import annotations

import itertools
import os
import threading

from .errors import InvalidArgumentError
from .model import Filter, InsertManyResult, MetricDocument
from .protocol import Connection

ROUTERS_ENV = "SHARDBATCH_ROUTERS"


def read_endpoints_file(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def routers_from_env() -> list[str]:
    value = os.environ.get(ROUTERS_ENV, "")
    return [e.strip() for e in value.split(",") if e.strip()]


class RouterClient:
    """Connection to one router, safe to share between threads."""

    def __init__(self, endpoint: str, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._conn = None
        self._lock = threading.Lock()

    def _connection(self) -> Connection:
        with self._lock:
            if self._conn is None or self._conn.closed:
                self._conn = Connection(self.endpoint)
            return self._conn

    def ping(self):
        return self._connection().request("ping", timeout=self.timeout).payload

    def insert_many(self, collection: str, docs, ordered: bool = False) -> InsertManyResult:
        wire = [d.to_wire() if isinstance(d, MetricDocument) else d for d in docs]
        resp = self._connection().request(
            "insert_batch",
            {"collection": collection, "docs": wire, "ordered": ordered},
            timeout=self.timeout,
        )
        return InsertManyResult.from_wire(resp.payload)

    def find_raw(self, collection: str, f: Filter):
        """Yield matching documents in wire form."""
        for env in self._connection().stream(
            "find", {"collection": collection, "filter": f.validate().to_wire()}, timeout=self.timeout
        ):
            yield from env.payload.get("docs", ())

    def find(self, collection: str, f: Filter):
        for raw in self.find_raw(collection, f):
            yield MetricDocument.from_wire(raw)

    def count(self, collection: str, f: Filter) -> int:
        return sum(1 for _ in self.find_raw(collection, f))

    def close(self):
        with self._lock:
            if self._conn is not None:
                self._conn.close()
                self._conn = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ClusterClient:
    """Spreads requests round-robin over several router endpoints."""

    def __init__(self, endpoints, timeout: float = 120.0):
        if not endpoints:
            raise InvalidArgumentError("no router endpoints given")
        self.clients = [RouterClient(e, timeout) for e in endpoints]
        self._rr = itertools.cycle(self.clients)
        self._lock = threading.Lock()

    def _next(self) -> RouterClient:
        with self._lock:
            return next(self._rr)

    def insert_many(self, collection, docs, ordered=False):
        return self._next().insert_many(collection, docs, ordered)

    def find(self, collection, f):
        return self._next().find(collection, f)

    def count(self, collection, f):
        return self._next().count(collection, f)

    def close(self):
        for c in self.clients:
            c.close()
