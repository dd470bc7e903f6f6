"""Throughput benchmarks: worker-count scaling and Merkle on/off."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Optional

from .cluster import Cluster, ClusterConfig
from .workload import WorkloadSpec

LOW_CONFLICT_MIX = {"read": 0.5, "update": 0.5}


@dataclass
class BenchResult:
    workers: int
    merkle: bool
    transactions: int
    elapsed: float
    reexecutions: int
    statement_latency: float
    signature: str

    @property
    def tps(self) -> float:
        return self.transactions / self.elapsed if self.elapsed else 0.0

    def as_record(self) -> dict:
        return {
            "kind": "bench",
            "workers": self.workers,
            "merkle": self.merkle,
            "transactions": self.transactions,
            "elapsed_s": round(self.elapsed, 6),
            "tps": round(self.tps, 2),
            "retry_rate": round(self.reexecutions / self.transactions, 6) if self.transactions else 0.0,
            "statement_latency": self.statement_latency,
            "signature": self.signature,
        }


def run_bench(
    workers: int,
    transactions: int = 2000,
    rows: int = 10_000,
    distribution: str = "uniform",
    statement_latency: float = 0.0,
    merkle: bool = True,
    signature: str = "null",
    replicas: int = 1,
    seed: int = 1,
    mix: Optional[dict] = None,
    partitions: int = 200,
) -> BenchResult:
    """Fill the log first, then time the replicas draining it."""
    cfg = ClusterConfig(
        replicas=replicas,
        workers=workers,
        signature=signature,
        merkle=merkle,
        statement_latency=statement_latency,
        partitions=partitions,
        seed=seed,
        timeout=600.0,
    )
    spec = WorkloadSpec(
        rows=rows, transactions=transactions, distribution=distribution, mix=dict(mix or LOW_CONFLICT_MIX), seed=seed
    )
    with Cluster(cfg, spec) as cluster:
        cluster.submit_workload()
        last = cluster.log.current_offset()
        t0 = time.perf_counter()
        cluster.start()
        if not cluster.wait_all(last):
            raise RuntimeError("benchmark did not finish")
        elapsed = time.perf_counter() - t0
        reexec = sum(r.executor.reexecutions for r in cluster.replicas.values())
    return BenchResult(workers, merkle, last * replicas, elapsed, reexec, statement_latency, signature)


def sweep(
    worker_counts: Iterable[int],
    merkle_modes: Iterable[bool] = (True,),
    repeats: int = 1,
    **kwargs,
) -> list[BenchResult]:
    """Best-of-``repeats`` result for every (workers, merkle) pair."""
    out = []
    for merkle in merkle_modes:
        for w in worker_counts:
            runs = [run_bench(w, merkle=merkle, **kwargs) for _ in range(repeats)]
            out.append(max(runs, key=lambda r: r.tps))
    return out


def plot(results: list[BenchResult], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for merkle in sorted({r.merkle for r in results}):
        pts = sorted((r.workers, r.tps) for r in results if r.merkle == merkle)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"merkle {'on' if merkle else 'off'}")
    ax.set_xlabel("workers")
    ax.set_ylabel("transactions / s")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
