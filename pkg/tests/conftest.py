import pytest

from rsmdb.harness.cluster import Cluster, ClusterConfig
from rsmdb.harness.workload import WorkloadSpec


@pytest.fixture
def make_cluster():
    made = []

    def factory(replicas=4, workers=2, rows=600, transactions=0, partitions=4, signature="ed25519", **kw):
        spec_kw = {k: kw.pop(k) for k in ("distribution", "mix", "seed") if k in kw}
        cfg = ClusterConfig(replicas=replicas, workers=workers, partitions=partitions, signature=signature, timeout=60.0, **kw)
        cluster = Cluster(cfg, WorkloadSpec(rows=rows, transactions=transactions, **spec_kw))
        made.append(cluster)
        return cluster

    yield factory
    for c in made:
        c.close()
