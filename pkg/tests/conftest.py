import pytest

from shardbatch.configsrv import ConfigServer
from shardbatch.protocol import Connection
from shardbatch.router import Router, RouterServer
from shardbatch.shard import ShardServer

TOKEN = "test-token"


class LocalCluster:
    """Config primary + mirror, N shards and one router, all in-process on ephemeral ports."""

    def __init__(self, root, n_shards=2, split_threshold=4096, token=TOKEN, collection="metrics", segment_max_bytes=None):
        self.root = root
        self.token = token
        self.split_threshold = split_threshold
        self.segment_max_bytes = segment_max_bytes
        self.collection = collection
        self.mirror = ConfigServer(root / "config-1", cluster_token=token, is_mirror=True, fsync=False).start()
        self.config = ConfigServer(
            root / "config-0", cluster_token=token, mirror_endpoint=self.mirror.endpoint, fsync=False
        ).start()
        self.shards = [self._start_shard(i) for i in range(n_shards)]
        if collection:
            with Connection(self.config.endpoint, token) as conn:
                conn.request("create_collection", {"name": collection, "index_fields": ["timestamp", "node_id"]})
        self.router_server = RouterServer([self.config.endpoint, self.mirror.endpoint], cluster_token=token).start()

    def _start_shard(self, i, port=0):
        kw = {"segment_max_bytes": self.segment_max_bytes} if self.segment_max_bytes else {}
        s = ShardServer(
            f"shard-{i}",
            self.root / f"shard-{i}",
            port=port,
            cluster_token=self.token,
            config_endpoint=self.config.endpoint,
            split_threshold=self.split_threshold,
            fsync=False,
            **kw,
        ).start()
        s.register()
        return s

    @property
    def router_endpoint(self):
        return self.router_server.endpoint

    def new_router(self):
        return Router([self.config.endpoint, self.mirror.endpoint], self.token)

    def shardmap(self):
        return self.config.store.meta.collections[self.collection]

    def live_counts(self):
        return {s.shard_id: s.store(self.collection).live_doc_count for s in self.shards}

    def stop(self):
        for srv in [self.router_server, *self.shards, self.config, self.mirror]:
            if not srv.stopped.is_set():
                srv.stop()


@pytest.fixture
def make_cluster(tmp_path):
    clusters = []

    def factory(**kw):
        c = LocalCluster(tmp_path / f"cluster{len(clusters)}", **kw)
        clusters.append(c)
        return c

    yield factory
    for c in clusters:
        c.stop()
