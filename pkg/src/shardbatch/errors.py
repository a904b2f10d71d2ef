"""Exception hierarchy shared by every shardbatch component.

Every error carries a short machine-readable ``code`` so it can cross the
wire inside an ``error`` envelope and be re-raised as the same class on the
other side (see :func:`from_code`).
"""


class ShardBatchError(Exception):
    code = "internal"
    retryable = False

    def __init__(self, message="", **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_payload(self):
        payload = {"code": self.code, "message": self.message}
        if self.details:
            payload["details"] = self.details
        return payload


class ProtocolError(ShardBatchError):
    code = "protocol"


class OversizeError(ProtocolError):
    code = "oversize"


class TransportError(ShardBatchError):
    """Request timed out; the caller may retry."""

    code = "transport"
    retryable = True


class NodeDownError(ShardBatchError):
    code = "node_down"


class AuthError(ShardBatchError):
    code = "auth"


class ConflictError(ShardBatchError):
    code = "conflict"


class PreconditionError(ShardBatchError):
    code = "precondition"


class NotFoundError(ShardBatchError):
    code = "not_found"


class StaleVersionError(ShardBatchError):
    code = "stale_version"


class InvalidSplitError(ShardBatchError):
    code = "invalid_split"


class InvalidArgumentError(ShardBatchError, ValueError):
    code = "invalid_argument"


class MalformedFilterError(InvalidArgumentError):
    code = "malformed_filter"


class UnsupportedModeError(ShardBatchError):
    code = "unsupported_mode"


class ClusterUnavailableError(ShardBatchError):
    code = "cluster_unavailable"


class PartialResultsError(ShardBatchError):
    code = "partial_results"

    def __init__(self, message="", shard_id=None, **details):
        super().__init__(message, shard_id=shard_id, **details)
        self.shard_id = shard_id


class MetadataUnavailableError(ShardBatchError):
    code = "metadata_unavailable"


class RoutingError(ShardBatchError):
    code = "routing"


class StorageError(ShardBatchError):
    code = "storage"


class RecoveryError(StorageError):
    code = "recovery"


class FormatError(ShardBatchError):
    code = "format"


class TooFewNodesError(InvalidArgumentError):
    code = "too_few_nodes"


class InvalidCountError(InvalidArgumentError):
    code = "invalid_count"


class LaunchFailedError(ShardBatchError):
    code = "launch_failed"

    def __init__(self, message="", role=None, log_excerpt="", **details):
        super().__init__(message, role=role, **details)
        self.role = role
        self.log_excerpt = log_excerpt


class LockError(ShardBatchError):
    code = "lock"


class InvalidStateError(ShardBatchError):
    code = "invalid_state"


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


_BY_CODE = {cls.code: cls for cls in _all_subclasses(ShardBatchError)}
_BY_CODE[ShardBatchError.code] = ShardBatchError


def from_code(code, message="", details=None):
    """Rebuild an exception from an ``error`` envelope payload."""
    cls = _BY_CODE.get(code, ShardBatchError)
    exc = cls.__new__(cls)
    ShardBatchError.__init__(exc, message, **(details or {}))
    if cls is PartialResultsError:
        exc.shard_id = (details or {}).get("shard_id")
    if cls is LaunchFailedError:
        exc.role = (details or {}).get("role")
        exc.log_excerpt = ""
    return exc
