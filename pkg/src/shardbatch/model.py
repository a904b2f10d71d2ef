"""Document model, shard keys, filters and cluster metadata types.

All types here are immutable values and are safe to share between threads.
Each type has a ``to_wire``/``from_wire`` pair producing plain JSON-able
structures for the wire protocol and the on-disk formats.
"""

from __future__ import annotations

import bisect
import functools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import InvalidArgumentError, MalformedFilterError

INDEXABLE_FIELDS = ("timestamp", "node_id", "doc_id")

# Timestamps are 64-bit; these bound the per-node key interval used for pruning.
TS_FLOOR = -(2**63)
TS_CEIL = 2**63


@functools.total_ordering
@dataclass(frozen=True, eq=True)
class ShardKey:
    """Compound shard key ordered by ``(node_id, timestamp)``.

    ``bound`` is -1 for :data:`KEY_MIN`, +1 for :data:`KEY_MAX` and 0 for
    every concrete key, so the sentinels sort outside all concrete keys.
    Python string comparison is by code point, which matches bytewise UTF-8
    order.
    """

    node_id: str
    timestamp: int
    bound: int = 0

    def _tuple(self):
        return (self.bound, self.node_id, self.timestamp)

    def __lt__(self, other):
        if not isinstance(other, ShardKey):
            return NotImplemented
        return self._tuple() < other._tuple()

    def __repr__(self):
        if self.bound < 0:
            return "KEY_MIN"
        if self.bound > 0:
            return "KEY_MAX"
        return f"ShardKey({self.node_id!r}, {self.timestamp})"

    def to_wire(self):
        if self.bound < 0:
            return "MIN"
        if self.bound > 0:
            return "MAX"
        return [self.node_id, self.timestamp]

    @classmethod
    def from_wire(cls, value):
        if value == "MIN":
            return KEY_MIN
        if value == "MAX":
            return KEY_MAX
        node_id, timestamp = value
        return cls(str(node_id), int(timestamp))


KEY_MIN = ShardKey("", 0, -1)
KEY_MAX = ShardKey("", 0, 1)


def compare_keys(a: ShardKey, b: ShardKey) -> int:
    """Return -1, 0 or 1 as ``a`` is less than, equal to or greater than ``b``."""
    ta, tb = a._tuple(), b._tuple()
    return (ta > tb) - (ta < tb)


def make_doc_id(client_id: int, counter: int) -> bytes:
    """Pack a 16-byte document id: 4-byte client id then a 96-bit counter."""
    if not 0 <= client_id < 2**32 or not 0 <= counter < 2**96:
        raise InvalidArgumentError("client_id or counter out of range")
    return (
        client_id.to_bytes(4, "big")
        + (counter >> 64).to_bytes(4, "big")
        + (counter & (2**64 - 1)).to_bytes(8, "big")
    )


@dataclass(frozen=True)
class MetricDocument:
    doc_id: bytes
    node_id: str
    timestamp: int
    metrics: Mapping[str, float]

    @property
    def key(self) -> ShardKey:
        return ShardKey(self.node_id, self.timestamp)

    def to_wire(self):
        return {
            "_id": self.doc_id.hex(),
            "node_id": self.node_id,
            "timestamp": self.timestamp,
            "metrics": dict(self.metrics),
        }

    @classmethod
    def from_wire(cls, obj):
        try:
            doc_id = bytes.fromhex(obj["_id"])
            node_id = obj["node_id"]
            timestamp = obj["timestamp"]
            metrics = obj["metrics"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed document: {exc}") from None
        if len(doc_id) != 16:
            raise InvalidArgumentError("doc_id must be 16 bytes")
        if not isinstance(node_id, str) or not isinstance(timestamp, int):
            raise InvalidArgumentError("node_id must be a string, timestamp an integer")
        if not metrics:
            raise InvalidArgumentError("metrics map is empty")
        return cls(doc_id, node_id, timestamp, metrics)


@dataclass(frozen=True)
class Filter:
    """Conjunction of optional clauses over the two indexed fields and doc_id."""

    node_ids: frozenset | None = None
    ts_lo: int | None = None
    ts_hi: int | None = None
    doc_id: bytes | None = None

    def __post_init__(self):
        if self.node_ids is not None and not isinstance(self.node_ids, frozenset):
            object.__setattr__(self, "node_ids", frozenset(self.node_ids))

    def validate(self):
        if self.node_ids is None and self.ts_lo is None and self.ts_hi is None and self.doc_id is None:
            raise MalformedFilterError("filter has no clauses")
        if self.node_ids is not None and not self.node_ids:
            raise MalformedFilterError("node_ids clause is empty")
        if self.ts_lo is not None and self.ts_hi is not None and self.ts_lo >= self.ts_hi:
            raise MalformedFilterError(f"empty time range [{self.ts_lo}, {self.ts_hi})")
        return self

    def to_wire(self):
        out = {}
        if self.node_ids is not None:
            out["node_ids"] = sorted(self.node_ids)
        if self.ts_lo is not None:
            out["ts_lo"] = self.ts_lo
        if self.ts_hi is not None:
            out["ts_hi"] = self.ts_hi
        if self.doc_id is not None:
            out["doc_id"] = self.doc_id.hex()
        return out

    @classmethod
    def from_wire(cls, obj):
        if not isinstance(obj, dict):
            raise MalformedFilterError("filter must be an object")
        try:
            node_ids = obj.get("node_ids")
            return cls(
                node_ids=frozenset(node_ids) if node_ids is not None else None,
                ts_lo=obj.get("ts_lo"),
                ts_hi=obj.get("ts_hi"),
                doc_id=bytes.fromhex(obj["doc_id"]) if obj.get("doc_id") is not None else None,
            ).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, MalformedFilterError):
                raise
            raise MalformedFilterError(f"malformed filter: {exc}") from None

    def key_intervals(self):
        """Half-open shard-key intervals covering every matching key, or None.

        None means the filter cannot be pruned by shard key.
        """
        if self.node_ids is None:
            return None
        lo_ts = self.ts_lo if self.ts_lo is not None else TS_FLOOR
        hi_ts = self.ts_hi if self.ts_hi is not None else TS_CEIL
        return [(ShardKey(n, lo_ts), ShardKey(n, hi_ts)) for n in sorted(self.node_ids)]


def matches(doc: MetricDocument, f: Filter) -> bool:
    if f.node_ids is not None and doc.node_id not in f.node_ids:
        return False
    if f.ts_lo is not None and doc.timestamp < f.ts_lo:
        return False
    if f.ts_hi is not None and doc.timestamp >= f.ts_hi:
        return False
    if f.doc_id is not None and doc.doc_id != f.doc_id:
        return False
    return True


@dataclass(frozen=True)
class ChunkRange:
    """Half-open key range ``[lo, hi)`` owned by one shard.

    ``prior_owners`` lists shards that owned part of this range before a
    split reassigned it; they may still hold documents in it since data is
    never migrated.
    """

    chunk_id: int
    lo: ShardKey
    hi: ShardKey
    owner_shard: str
    approx_doc_count: int = 0
    prior_owners: tuple = ()

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidArgumentError(f"chunk {self.chunk_id}: lo must be below hi")
        if self.approx_doc_count < 0:
            raise InvalidArgumentError("approx_doc_count must be non-negative")

    def holders(self):
        """Every shard that may hold documents in this range."""
        return {self.owner_shard, *self.prior_owners}

    def to_wire(self):
        return {
            "chunk_id": self.chunk_id,
            "lo": self.lo.to_wire(),
            "hi": self.hi.to_wire(),
            "owner_shard": self.owner_shard,
            "approx_doc_count": self.approx_doc_count,
            "prior_owners": list(self.prior_owners),
        }

    @classmethod
    def from_wire(cls, obj):
        return cls(
            chunk_id=obj["chunk_id"],
            lo=ShardKey.from_wire(obj["lo"]),
            hi=ShardKey.from_wire(obj["hi"]),
            owner_shard=obj["owner_shard"],
            approx_doc_count=obj.get("approx_doc_count", 0),
            prior_owners=tuple(obj.get("prior_owners", ())),
        )


def key_in_range(k: ShardKey, r: ChunkRange) -> bool:
    return r.lo <= k < r.hi


@dataclass(frozen=True)
class ShardMap:
    version: int
    collection: str
    chunks: tuple
    shard_endpoints: Mapping[str, str]
    index_fields: tuple = ()
    _los: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "chunks", tuple(self.chunks))
        object.__setattr__(self, "index_fields", tuple(self.index_fields))
        object.__setattr__(self, "_los", tuple(c.lo for c in self.chunks))

    def validate(self):
        """Raise InvalidArgumentError unless the chunks partition the keyspace."""
        if not self.chunks:
            raise InvalidArgumentError("shard map has no chunks")
        if self.chunks[0].lo != KEY_MIN or self.chunks[-1].hi != KEY_MAX:
            raise InvalidArgumentError("chunks do not cover [KEY_MIN, KEY_MAX)")
        for left, right in zip(self.chunks, self.chunks[1:]):
            if left.hi != right.lo:
                raise InvalidArgumentError(
                    f"chunks {left.chunk_id} and {right.chunk_id} are not contiguous"
                )
        for c in self.chunks:
            if c.owner_shard not in self.shard_endpoints:
                raise InvalidArgumentError(f"owner {c.owner_shard!r} has no endpoint")
        return self

    def chunk_for(self, key: ShardKey) -> ChunkRange:
        return self.chunks[bisect.bisect_right(self._los, key) - 1]

    def chunks_intersecting(self, lo: ShardKey, hi: ShardKey) -> list:
        """Chunks overlapping the half-open key interval ``[lo, hi)``."""
        start = max(bisect.bisect_right(self._los, lo) - 1, 0)
        out = []
        for c in self.chunks[start:]:
            if c.lo >= hi:
                break
            if lo < c.hi:
                out.append(c)
        return out

    def target_shards(self, f: Filter) -> set:
        """Shards that may hold documents matching ``f``."""
        intervals = f.key_intervals()
        if intervals is None:
            chunks: Iterable[ChunkRange] = self.chunks
        else:
            chunks = [c for lo, hi in intervals for c in self.chunks_intersecting(lo, hi)]
        out = set()
        for c in chunks:
            out |= c.holders()
        return out

    def chunk_counts(self) -> dict:
        counts = {sid: 0 for sid in self.shard_endpoints}
        for c in self.chunks:
            counts[c.owner_shard] = counts.get(c.owner_shard, 0) + 1
        return counts

    def to_wire(self):
        return {
            "version": self.version,
            "collection": self.collection,
            "chunks": [c.to_wire() for c in self.chunks],
            "shard_endpoints": dict(sorted(self.shard_endpoints.items())),
            "index_fields": list(self.index_fields),
        }

    @classmethod
    def from_wire(cls, obj):
        return cls(
            version=obj["version"],
            collection=obj["collection"],
            chunks=tuple(ChunkRange.from_wire(c) for c in obj["chunks"]),
            shard_endpoints=dict(obj["shard_endpoints"]),
            index_fields=tuple(obj.get("index_fields", ())),
        )


@dataclass(frozen=True)
class RoleAssignment:
    config_nodes: tuple
    shard_nodes: tuple
    router_nodes: tuple
    client_nodes: tuple

    def counts(self):
        return (
            len(self.config_nodes),
            len(self.shard_nodes),
            len(self.router_nodes),
            len(self.client_nodes),
        )

    def all_nodes(self):
        return [*self.config_nodes, *self.shard_nodes, *self.router_nodes, *self.client_nodes]

    def validate(self, nodes=None):
        groups = self.all_nodes()
        if len(set(groups)) != len(groups):
            raise InvalidArgumentError("role lists overlap")
        if nodes is not None and sorted(groups) != sorted(nodes):
            raise InvalidArgumentError("roles do not cover the node list exactly")
        if len(self.config_nodes) != 2:
            raise InvalidArgumentError("exactly 2 config nodes required")
        if not self.shard_nodes or not self.router_nodes or not self.client_nodes:
            raise InvalidArgumentError("need at least one shard, router and client")
        return self


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    node_ids: frozenset
    start: int
    duration_minutes: int

    def __post_init__(self):
        object.__setattr__(self, "node_ids", frozenset(self.node_ids))
        if not self.node_ids:
            raise InvalidArgumentError(f"job {self.job_id}: empty node set")
        if self.duration_minutes < 1:
            raise InvalidArgumentError(f"job {self.job_id}: duration must be >= 1 minute")

    @property
    def end(self) -> int:
        return self.start + 60 * self.duration_minutes

    @property
    def expected_docs(self) -> int:
        return len(self.node_ids) * self.duration_minutes

    def to_filter(self) -> Filter:
        return Filter(node_ids=self.node_ids, ts_lo=self.start, ts_hi=self.end)

    def to_wire(self):
        return {
            "job_id": self.job_id,
            "node_ids": sorted(self.node_ids),
            "start": self.start,
            "duration_minutes": self.duration_minutes,
        }

    @classmethod
    def from_wire(cls, obj):
        return cls(obj["job_id"], frozenset(obj["node_ids"]), obj["start"], obj["duration_minutes"])


@dataclass(frozen=True)
class WriteError:
    batch_index: int
    code: str
    message: str

    def to_wire(self):
        return [self.batch_index, self.code, self.message]


@dataclass
class InsertManyResult:
    inserted_count: int = 0
    errors: list = field(default_factory=list)

    def error_indices(self):
        return {e.batch_index for e in self.errors}

    def to_wire(self):
        return {"inserted_count": self.inserted_count, "errors": [e.to_wire() for e in self.errors]}

    @classmethod
    def from_wire(cls, obj):
        return cls(obj["inserted_count"], [WriteError(*e) for e in obj["errors"]])
