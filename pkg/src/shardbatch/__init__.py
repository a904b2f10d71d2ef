"""shardbatch: a miniature range-sharded metric store run as a transient batch job."""

from .errors import ShardBatchError
from .model import (
    KEY_MAX,
    KEY_MIN,
    ChunkRange,
    Filter,
    InsertManyResult,
    JobRecord,
    MetricDocument,
    RoleAssignment,
    ShardKey,
    ShardMap,
    compare_keys,
    key_in_range,
    make_doc_id,
    matches,
)

__version__ = "0.1.0"
