import json
import random
from collections import Counter

import pytest
from click.testing import CliRunner

from rsmdb.harness.bench import run_bench
from rsmdb.harness.cli import main
from rsmdb.harness.scenario import ConfigError, parse_scenario, run_scenario
from rsmdb.harness.workload import WorkloadSpec, ZipfianGenerator, operations

SCENARIO = """
# small end-to-end run
replicas = 4
workers = 3
rows = 2000
transactions = 600
partitions = 2
signature = null
seed = 7
fault = at=100 action=inject-corrupt replica=3 rows=30 leaves=3
fault = at=200 action=compare-states repair=yes
fault = at=300 action=inject-nondet
fault = at=400 action=save-sync-state
"""


def test_zipfian_head_matches_pmf():
    n, theta, draws = 1000, 0.99, 200_000
    gen = ZipfianGenerator(n, theta, random.Random(1))
    counts = Counter(gen.next() for _ in range(draws))
    zeta = sum(1 / i**theta for i in range(1, n + 1))
    for i in (0, 1):
        expect = draws / (i + 1) ** theta / zeta
        assert abs(counts[i] - expect) < 5 * expect**0.5
    assert counts[0] > counts[1] > counts[50]
    assert min(counts) >= 0 and max(counts) < n


def test_zipfian_rejects_bad_parameters():
    with pytest.raises(ValueError):
        ZipfianGenerator(0)
    with pytest.raises(ValueError):
        ZipfianGenerator(10, theta=1.0)


def test_operations_are_reproducible_and_mixed():
    spec = WorkloadSpec(rows=100, transactions=2000, seed=3)
    ops = list(operations(spec))
    assert ops == list(operations(spec))
    share = Counter(p for p, _ in ops)
    assert abs(share["read"] / 2000 - 0.5) < 0.05
    assert set(share) == {"read", "update", "scan", "rmw"}


@pytest.mark.parametrize(
    "text, message",
    [
        ("replicas = x", "bad value"),
        ("nonsense = 1", "unknown key"),
        ("just words", "key = value"),
        ("fault = at=1 action=explode", "unknown fault action"),
        ("fault = action=compare-states", "at="),
        ("transactions = 10\nfault = at=50 action=compare-states", "outside"),
        ("replicas = 2\nfault = at=0 action=compare-states", "at least 3"),
        ("distribution = pareto", "distribution"),
        ("merkle = maybe", "bad value"),
    ],
)
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_scenario(text)


def test_config_roundtrip():
    cfg = parse_scenario(SCENARIO)
    assert parse_scenario(cfg.to_text()) == cfg
    assert [f.action for f in cfg.faults] == ["inject-corrupt", "compare-states", "inject-nondet", "save-sync-state"]


def test_scenario_end_to_end_and_reproducible():
    cfg = parse_scenario(SCENARIO)
    a = run_scenario(cfg)
    assert a.violations == []
    (cmp,) = a.of_kind("compare-states")
    assert cmp["groups"] == [[0, 1, 2], [3]]
    det = {r["injected"]: r for r in a.of_kind("detection")}
    assert det["inject-nondet"]["latency"] == 0
    assert det["inject-corrupt"]["flagged_index"] is not None
    assert a.of_kind("final")[0]["digests_equal"]
    b = run_scenario(parse_scenario(SCENARIO))
    assert a.of_kind("final") == b.of_kind("final")
    keep = ("flag", "compare-states", "repair", "detection")
    assert [r for r in a.stable_records() if r["kind"] in keep] == [r for r in b.stable_records() if r["kind"] in keep]


def test_bench_smoke():
    r = run_bench(2, transactions=100, rows=200)
    rec = r.as_record()
    assert rec["transactions"] == 100 and rec["tps"] > 0


@pytest.fixture
def run_dir(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("replicas = 3\nworkers = 2\nrows = 500\ntransactions = 300\npartitions = 2\nsignature = null\n")
    out = tmp_path / "run"
    res = CliRunner().invoke(main, ["run", str(cfg), "--save-dir", str(out), "--report", str(tmp_path / "r.jsonl")])
    assert res.exit_code == 0, res.output
    final = [json.loads(ln) for ln in res.output.splitlines() if '"final"' in ln]
    assert final[0]["digests_equal"]
    return out


def test_cli_replay_and_digest_tools(run_dir, tmp_path):
    cli = CliRunner()
    replay = tmp_path / "replay.dump"
    res = cli.invoke(main, ["dump-state", str(run_dir), "--out", str(replay), "--workers", "4"])
    assert res.exit_code == 0, res.output
    assert replay.read_text() == (run_dir / "replica-0.dump").read_text()
    forest = ["--partitions", "2"]
    dumps = [str(run_dir / f"replica-{i}.dump") for i in range(3)]
    res = cli.invoke(main, ["verify-digests", *dumps, "--expect", str(run_dir / "digests.txt"), *forest])
    assert res.exit_code == 0, res.output
    res = cli.invoke(main, ["compare-states", *dumps, *forest])
    assert res.exit_code == 0 and '"groups": [[' in res.output
    partial = tmp_path / "partial.dump"
    assert cli.invoke(main, ["dump-state", str(run_dir), "--out", str(partial), "--through", "100"]).exit_code == 0
    assert cli.invoke(main, ["compare-states", dumps[0], str(partial), *forest]).exit_code == 1


def test_cli_corrupt_and_recover(run_dir, tmp_path):
    cli = CliRunner()
    forest = ["--partitions", "2"]
    good = str(run_dir / "replica-0.dump")
    bad = str(tmp_path / "bad.dump")
    res = cli.invoke(main, ["inject-corrupt", good, "--out", bad, "--rows", "12", "--leaves", "3", *forest])
    assert res.exit_code == 0, res.output
    assert cli.invoke(main, ["compare-states", good, bad, *forest]).exit_code == 1
    fixed = str(tmp_path / "fixed.dump")
    res = cli.invoke(main, ["recover", bad, good, "--out", fixed, *forest])
    assert res.exit_code == 0, res.output
    assert json.loads(res.output)["rows_written"] == 12
    with open(fixed) as a, open(good) as b:
        assert a.read() == b.read()
    tm2 = str(tmp_path / "tm2.dump")
    cli.invoke(main, ["inject-corrupt", good, "--out", tm2, "--rows", "1", "--leaves", "1", "--mode", "tm2", *forest])
    res = cli.invoke(main, ["verify-digests", tm2, *forest])
    assert res.exit_code == 1 and "usertable" in res.output


def test_cli_bench_and_bad_scenario(tmp_path):
    cli = CliRunner()
    res = cli.invoke(main, ["bench", "--workers", "1,2", "--transactions", "60", "--rows", "200", "--latency", "0", "--merkle", "on"])
    assert res.exit_code == 0, res.output
    assert len(res.output.strip().splitlines()) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("workers = none\n")
    res = cli.invoke(main, ["run", str(bad)])
    assert res.exit_code == 2 and "bad value" in res.output
