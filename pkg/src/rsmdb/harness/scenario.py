"""Scenario files and the scenario runner.

A scenario file is flat ``key = value`` text; ``#`` starts a comment.
``fault`` may repeat, one action per line::

    replicas = 4
    workers = 8
    transactions = 5000
    fault = at=1000 action=inject-corrupt replica=3 rows=300 leaves=8 mode=tm1
    fault = at=2000 action=compare-states repair=yes
    fault = at=3000 action=inject-nondet
    fault = at=3500 action=save-sync-state

``at`` counts workload transactions submitted before the action fires.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from ..replica import state_key
from .cluster import Cluster, ClusterConfig
from .workload import WorkloadSpec, operations

log = logging.getLogger(__name__)

ACTIONS = ("inject-corrupt", "inject-nondet", "compare-states", "save-sync-state")


class ConfigError(ValueError):
    pass


@dataclass
class FaultAction:
    at: int
    action: str
    params: dict[str, str] = field(default_factory=dict)

    def get(self, name: str, default: Any = None, kind=str):
        if name not in self.params:
            return default
        try:
            return kind(self.params[name])
        except ValueError:
            raise ConfigError(f"fault {self.action}: bad {name}={self.params[name]!r}") from None

    @classmethod
    def parse(cls, text: str) -> "FaultAction":
        params = {}
        for part in text.split():
            if "=" not in part:
                raise ConfigError(f"fault parameter {part!r} is not key=value")
            k, v = part.split("=", 1)
            params[k] = v
        if "at" not in params or "action" not in params:
            raise ConfigError(f"fault needs at= and action=: {text!r}")
        action = params.pop("action")
        if action not in ACTIONS:
            raise ConfigError(f"unknown fault action {action!r}")
        try:
            at = int(params.pop("at"))
        except ValueError:
            raise ConfigError(f"fault offset must be an integer: {text!r}") from None
        return cls(at, action, params)


@dataclass
class ScenarioConfig:
    replicas: int = 4
    workers: int = 1
    max_set_size: int = 0
    partitions: int = 200
    fanout: int = 16
    levels: int = 1
    rows: int = 10_000
    transactions: int = 10_000
    distribution: str = "zipfian"
    theta: float = 0.99
    read: float = 0.5
    update: float = 0.3
    scan: float = 0.05
    rmw: float = 0.15
    field_count: int = 4
    field_length: int = 16
    signature: str = "ed25519"
    mode: str = "state"
    merkle: bool = True
    statement_latency: float = 0.0
    clients: int = 64
    seed: int = 1
    timeout: float = 120.0
    faults: list[FaultAction] = field(default_factory=list)

    def validate(self) -> None:
        if self.replicas < 1 or self.workers < 1:
            raise ConfigError("replicas and workers must be positive")
        if any(f.action != "save-sync-state" for f in self.faults) and self.replicas < 3:
            raise ConfigError("fault scenarios need at least 3 replicas for a majority")
        for f in self.faults:
            if not 0 <= f.at <= self.transactions:
                raise ConfigError(f"fault offset {f.at} outside the workload")
        if self.distribution not in ("zipfian", "uniform"):
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.signature not in ("ed25519", "rsa", "null"):
            raise ConfigError(f"unknown signature mode {self.signature!r}")
        if self.mode not in ("state", "result"):
            raise ConfigError(f"unknown aggregation mode {self.mode!r}")

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(
            replicas=self.replicas,
            workers=self.workers,
            max_set_size=self.max_set_size or None,
            partitions=self.partitions,
            fanout=self.fanout,
            levels=self.levels,
            signature=self.signature,
            merkle=self.merkle,
            statement_latency=self.statement_latency,
            mode=self.mode,
            clients=self.clients,
            timeout=self.timeout,
            seed=self.seed,
        )

    def workload(self) -> WorkloadSpec:
        mix = {k: v for k, v in (("read", self.read), ("update", self.update), ("scan", self.scan), ("rmw", self.rmw)) if v > 0}
        return WorkloadSpec(
            rows=self.rows,
            transactions=self.transactions,
            distribution=self.distribution,
            theta=self.theta,
            mix=mix,
            field_count=self.field_count,
            field_length=self.field_length,
            seed=self.seed,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "faults":
                continue
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        for fa in self.faults:
            extra = " ".join(f"{k}={v}" for k, v in fa.params.items())
            lines.append(f"fault = at={fa.at} action={fa.action} {extra}".rstrip())
        return "\n".join(lines) + "\n"


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def parse_scenario(text: str) -> ScenarioConfig:
    cfg = ScenarioConfig()
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "fault":
            cfg.faults.append(FaultAction.parse(value))
            continue
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                if value.lower() not in _BOOL:
                    raise ValueError(value)
                setattr(cfg, key, _BOOL[value.lower()])
            elif kind == "int":
                setattr(cfg, key, int(value))
            elif kind == "float":
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    cfg.faults.sort(key=lambda f: f.at)
    cfg.validate()
    return cfg


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as fh:
        return parse_scenario(fh.read())


@dataclass
class ScenarioReport:
    records: list[dict] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    def add(self, kind: str, **data: Any) -> dict:
        rec = {"kind": kind, **data}
        self.records.append(rec)
        return rec

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def to_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, default=_jsonable) for r in self.records]

    def stable_records(self) -> list[dict]:
        """Records without wall-clock fields, for reproducibility checks."""
        out = []
        for r in self.records:
            out.append({k: v for k, v in r.items() if not k.endswith("_s") and k not in ("tps", "elapsed")})
        return out


def _jsonable(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(type(value).__name__)


def _perform(cluster: Cluster, fault: FaultAction, report: ScenarioReport, injections: list[dict]) -> None:
    offset = cluster.log.current_offset()
    if fault.action == "inject-corrupt":
        rid = fault.get("replica", cluster.cfg.replicas - 1, int)
        # inject on the state reached after every submitted entry
        cluster.wait_all(offset, replicas=[rid])
        keys = cluster.inject_corruption(
            rid,
            rows=fault.get("rows", 300, int),
            leaves=fault.get("leaves", 8, int),
            mode=fault.get("mode", "tm1"),
            kind=fault.get("kind", "update"),
            seed=fault.get("seed", 0, int),
        )
        rec = report.add("inject-corrupt", replica=rid, after_index=offset, rows=len(keys), mode=fault.get("mode", "tm1"))
        injections.append(rec)
    elif fault.action == "inject-nondet":
        index = cluster.inject_nondeterministic_tx()
        injections.append(report.add("inject-nondet", index=index))
    elif fault.action == "compare-states":
        rnd = cluster.recovery.run_detection_round()
        report.add(
            "compare-states",
            mark=rnd.mark,
            groups=rnd.groups,
            flagged=rnd.rest,
            missing=sorted(rnd.missing),
            elapsed=rnd.elapsed,
        )
        if fault.get("repair", "yes") in ("yes", "true", "1"):
            for rep in cluster.recovery.handle_round(rnd):
                report.add("repair", **rep.as_record())
    elif fault.action == "save-sync-state":
        cluster.wait_all()
        cluster.settle()
        groups = _groups_from_states(cluster)
        if len(groups) > 1:
            for rep in cluster.recovery.recover_divergent_set(groups):
                report.add("repair", **rep.as_record())
        else:
            report.add("save-sync-state", skipped="states agree")


def _groups_from_states(cluster: Cluster) -> list[list[int]]:
    by_state: dict[tuple, list[int]] = {}
    for rid, st in sorted(cluster.states().items()):
        by_state.setdefault(st, []).append(rid)
    return list(by_state.values())


def run_scenario(cfg: ScenarioConfig, save_dir: Optional[str] = None) -> ScenarioReport:
    cfg.validate()
    report = ScenarioReport()
    cluster = Cluster(cfg.cluster_config(), cfg.workload())
    if save_dir:
        os.makedirs(save_dir, exist_ok=True)
        cluster.replicas[0].store.save_dump(os.path.join(save_dir, "initial.dump"))
    injections: list[dict] = []
    faults = list(cfg.faults)
    t0 = time.perf_counter()
    try:
        cluster.start()
        submitted = 0
        for proc, args in operations(cfg.workload()):
            while faults and faults[0].at == submitted:
                _perform(cluster, faults.pop(0), report, injections)
            cluster.submit(proc, *args)
            submitted += 1
        while faults:
            _perform(cluster, faults.pop(0), report, injections)
        if not cluster.wait_all(timeout=cfg.timeout):
            report.violations.append("replicas did not reach the end of the log in time")
        elapsed = time.perf_counter() - t0
        cluster.settle()
        last = cluster.log.current_offset()
        replicas = cluster.replicas.values()
        metrics = [r.executor.metrics() for r in replicas]
        commits = sum(m["commits"] for m in metrics)
        report.add(
            "throughput",
            workers=cfg.workers,
            replicas=cfg.replicas,
            log_entries=last,
            elapsed=elapsed,
            tps=last / elapsed if elapsed else 0.0,
            retry_rate=sum(m["reexecutions"] for m in metrics) / commits if commits else 0.0,
        )
        flagged = cluster.aggregator.flagged()
        undecided = cluster.aggregator.undecided()
        for inj in injections:
            start = inj.get("index", inj.get("after_index", 0) + 1)
            hits = sorted(i for i in [*flagged, *undecided] if i >= start)
            marks = [r["mark"] for r in report.of_kind("compare-states") if r["mark"] >= start and r["flagged"]]
            first = min(hits[:1] + marks[:1], default=None)
            report.add("detection", injected=inj["kind"], at=start, flagged_index=first, latency=None if first is None else first - start)
        for index, ids in flagged.items():
            report.add("flag", index=index, replicas=sorted(ids))
        for index in undecided:
            report.add("no-majority", index=index)
        states = {rid: state_key(r.current_digests()) for rid, r in cluster.replicas.items()}
        equal = len(set(states.values())) == 1
        digest = {t: d.hex() for t, d in next(iter(states.values()))} if equal else None
        report.add("final", log_entries=last, digests_equal=equal, digests=digest)
        if not equal:
            report.violations.append("final digests differ across replicas")
        consistent = cluster.forests_consistent()
        tm2 = any(r.get("mode") == "tm2" for r in injections)
        for rid, ok in consistent.items():
            if not ok and not tm2:
                report.violations.append(f"replica {rid}: incremental forest differs from recompute")
        for r in replicas:
            if r.worker_error is not None:
                report.violations.append(f"replica {r.replica_id}: worker error {r.worker_error!r}")
        if save_dir:
            cluster.log.dump(os.path.join(save_dir, "log.txt"))
            with open(os.path.join(save_dir, "scenario.cfg"), "w") as fh:
                fh.write(cfg.to_text())
            with open(os.path.join(save_dir, "admin.pub"), "w") as fh:
                fh.write(cluster.admin_keys.public.hex() + "\n")
            for rid, r in cluster.replicas.items():
                r.store.save_dump(os.path.join(save_dir, f"replica-{rid}.dump"))
            with open(os.path.join(save_dir, "digests.txt"), "w") as fh:
                r0 = cluster.replicas[0]
                snap = r0.store.take_snapshot()
                for t, f in sorted(r0.forests.items()):
                    fh.write(f.export_digest(snap) + "\n")
    finally:
        cluster.close()
    return report


def write_report(report: ScenarioReport, path: str) -> None:
    with open(path, "w") as fh:
        for line in report.to_lines():
            fh.write(line + "\n")

