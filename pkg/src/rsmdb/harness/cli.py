"""Command line entry point: ``rsmdb <subcommand>``.

Every subcommand exits non-zero when an invariant is violated or states
disagree, so scripts can chain them.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click

from ..bus import Bus
from ..crypto import get_scheme
from ..logsvc import InProcessLog
from ..merkle import ForestConfig
from ..replica import CLIENTS, Replica
from ..store import Store
from .bench import plot, sweep
from .cluster import inject_corruption
from .offline import StateImage, group_states, repair_image
from .scenario import ConfigError, load_scenario, run_scenario, write_report

forest_options = [
    click.option("--partitions", default=200, show_default=True, help="Merkle partitions per table."),
    click.option("--fanout", default=16, show_default=True),
    click.option("--levels", default=1, show_default=True),
]


def with_forest(fn):
    for opt in reversed(forest_options):
        fn = opt(fn)
    return fn


def _echo_records(records) -> None:
    for rec in records:
        click.echo(json.dumps(rec, sort_keys=True, default=str))


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int) -> None:
    """Byzantine-corruption-tolerant replicated database simulator."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Write JSON lines here.")
@click.option("--save-dir", type=click.Path(file_okay=False), help="Save log, dumps and digests here.")
def run(scenario: str, report_path: str | None, save_dir: str | None) -> None:
    """Run a scenario file and print its report."""
    try:
        cfg = load_scenario(scenario)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc
    report = run_scenario(cfg, save_dir=save_dir)
    for line in report.to_lines():
        click.echo(line)
    if report_path:
        write_report(report, report_path)
    for v in report.violations:
        click.echo(f"VIOLATION: {v}", err=True)
    sys.exit(1 if report.violations else 0)


@main.command()
@click.option("--workers", default="1,2,4,8", show_default=True, help="Comma-separated worker counts.")
@click.option("--transactions", default=2000, show_default=True)
@click.option("--rows", default=10_000, show_default=True)
@click.option("--distribution", type=click.Choice(["uniform", "zipfian"]), default="uniform", show_default=True)
@click.option("--latency", default=0.001, show_default=True, help="Modeled seconds per storage statement.")
@click.option("--merkle", type=click.Choice(["on", "off", "both"]), default="both", show_default=True)
@click.option("--signature", type=click.Choice(["null", "ed25519", "rsa"]), default="null", show_default=True)
@click.option("--repeats", default=1, show_default=True)
@click.option("--plot", "plot_path", type=click.Path(dir_okay=False), help="Write a throughput plot (PNG).")
def bench(workers, transactions, rows, distribution, latency, merkle, signature, repeats, plot_path) -> None:
    """Throughput versus worker count, with and without Merkle maintenance."""
    counts = [int(w) for w in workers.split(",") if w]
    modes = {"on": (True,), "off": (False,), "both": (True, False)}[merkle]
    results = sweep(
        counts,
        modes,
        repeats=repeats,
        transactions=transactions,
        rows=rows,
        distribution=distribution,
        statement_latency=latency,
        signature=signature,
    )
    _echo_records(r.as_record() for r in results)
    if plot_path:
        plot(results, plot_path)


@main.command("inject-corrupt")
@click.argument("dump", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--table", default="usertable", show_default=True)
@click.option("--rows", default=300, show_default=True)
@click.option("--leaves", default=8, show_default=True)
@click.option("--mode", type=click.Choice(["tm1", "tm2"]), default="tm1", show_default=True)
@click.option("--kind", type=click.Choice(["update", "delete"]), default="update", show_default=True)
@click.option("--seed", default=0, show_default=True)
@with_forest
def inject_corrupt(dump, out, table, rows, leaves, mode, kind, seed, partitions, fanout, levels) -> None:
    """Tamper with rows of a state dump."""
    image = StateImage.load(dump, ForestConfig(partitions, fanout, levels))
    try:
        keys = inject_corruption(image, table, rows, leaves, mode, kind, seed)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    image.save(out)
    _echo_records([{"kind": "inject-corrupt", "rows": len(keys), "mode": mode, "keys": [k.decode() for k in keys[:10]]}])


@main.command("compare-states")
@click.argument("dumps", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@with_forest
def compare_states(dumps, partitions, fanout, levels) -> None:
    """Group state dumps by their table digests."""
    cfg = ForestConfig(partitions, fanout, levels)
    groups = group_states((d, StateImage.load(d, cfg)) for d in dumps)
    majority = groups[0] if len(groups[0]) > len(dumps) // 2 else None
    _echo_records([{"kind": "compare-states", "groups": groups, "majority": majority}])
    sys.exit(0 if len(groups) == 1 else 1)


@main.command()
@click.argument("corrupt", type=click.Path(exists=True, dir_okay=False))
@click.argument("reference", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@with_forest
def recover(corrupt, reference, out, partitions, fanout, levels) -> None:
    """Repair a dump from a reference dump by Merkle diff."""
    cfg = ForestConfig(partitions, fanout, levels)
    bad, good = StateImage.load(corrupt, cfg), StateImage.load(reference, cfg)
    stats = repair_image(bad, good)
    bad.save(out)
    ok = bad.state() == good.state()
    _echo_records([{"kind": "repair", **stats, "digest_ok": ok}])
    sys.exit(0 if ok else 1)


@main.command("dump-state")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--through", type=int, help="Replay only entries 1..N.")
@click.option("--workers", type=int, help="Override the scenario's worker count.")
def dump_state(run_dir, out, through, workers) -> None:
    """Replay a saved run's log on a fresh replica and write its canonical dump."""
    cfg = load_scenario(os.path.join(run_dir, "scenario.cfg"))
    with open(os.path.join(run_dir, "log.txt")) as fh:
        lines = fh.readlines()
    log = InProcessLog.from_lines(lines[:through] if through else lines)
    with open(os.path.join(run_dir, "initial.dump")) as fh:
        base = Store.load_dump(fh)
    with open(os.path.join(run_dir, "admin.pub")) as fh:
        admin_public = bytes.fromhex(fh.read().strip())
    user_tables = [t for t in base.table_names() if not t.startswith("__")]
    bus = Bus()
    replica = Replica(
        0,
        log,
        bus,
        schemas=[base.schema(t) for t in user_tables],
        forest_configs={t: ForestConfig(cfg.partitions, cfg.fanout, cfg.levels) for t in user_tables},
        admin_public=admin_public,
        scheme=get_scheme(cfg.signature),
        workers=workers or cfg.workers,
        merkle=cfg.merkle,
    )
    replica.store.apply_maintenance(
        {(t, r.key): r for t in [*user_tables, CLIENTS] for r in base.latest_rows(t)}
    )
    try:
        replica.start()
        done = replica.wait_for_index(log.current_offset(), timeout=cfg.timeout)
        replica.stop()
    finally:
        bus.close()
    if not done:
        raise click.ClickException("replay did not finish in time")
    replica.store.save_dump(out)
    _echo_records([{"kind": "dump-state", "entries": log.current_offset(), "out": out}])


@main.command("verify-digests")
@click.argument("dumps", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--expect", type=click.Path(exists=True, dir_okay=False), help="Digest export file to match.")
@with_forest
def verify_digests(dumps, expect, partitions, fanout, levels) -> None:
    """Check stored forests against their rows (and optionally expected digests)."""
    cfg = ForestConfig(partitions, fanout, levels)
    expected = None
    if expect:
        with open(expect) as fh:
            expected = [ln.strip() for ln in fh if ln.strip()]
    failed = False
    for d in dumps:
        image = StateImage.load(d, cfg)
        bad = image.inconsistent_tables()
        rec = {"kind": "verify-digests", "dump": d, "forest_mismatch": bad}
        if expected is not None:
            rec["digests_match"] = image.digest_lines() == expected
            failed |= not rec["digests_match"]
        failed |= bool(bad)
        _echo_records([rec])
    sys.exit(1 if failed else 0)


if __name__ == "__main__":  # pragma: no cover
    main()
