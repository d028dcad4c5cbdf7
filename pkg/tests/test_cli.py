import json

import numpy as np
import pytest

from failslow.cli import detect_trace, main
from failslow.model import ParallelTopology, TrafficModel, write_trace
from failslow.sim import ClusterScenario, emit_trace

CONFIG = {
    "seed": 3,
    "horizon": 200,
    "topology": {"tp": 1, "dp": 2, "pp": 2, "gpus_per_node": 1},
    "model": {
        "layers": 8, "hidden": 1024, "heads": 8, "head_dim": 128,
        "vocab": 0, "context": 1024, "num_micro_batches": 4,
    },
    "compute": {"base_compute": 0.05},
    "injections": [{"kind": "gpu_slowdown", "target": 1, "factor": 0.5, "start": 50, "end": 150}],
}


def write_config(tmp_path, cfg=CONFIG, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_simulate_off(tmp_path, capsys):
    out = tmp_path / "off"
    assert main(["simulate", str(write_config(tmp_path)), "--mitigate", "off", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert "mitigated" not in summary and summary["failslow"]["slowdown_pct"] > 0
    assert len((out / "timeline.jsonl").read_text().splitlines()) == 200
    assert not (out / "actions.jsonl").read_text().strip()


def test_simulate_on_reports_reduction(tmp_path):
    out = tmp_path / "on"
    assert main(["simulate", str(write_config(tmp_path)), "--out", str(out), "--trace"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["slowdown_reduction_pct"] is not None
    assert summary["mitigated"]["jct_s"] < summary["failslow"]["jct_s"]
    assert summary["actions"][0] == "S1"
    for name in ("timeline", "events", "actions", "baseline_timeline", "baseline_events"):
        assert (out / f"{name}.jsonl").exists()
    assert (out / "trace.csv").exists()
    ev = [json.loads(l) for l in (out / "events.jsonl").read_text().splitlines()]
    assert ev and ev[0]["located"]["gpus"] == [1]


def test_malformed_config_names_the_field(tmp_path, capsys):
    bad = dict(CONFIG, compute={"base_compute": -1})
    assert main(["simulate", str(write_config(tmp_path, bad)), "--out", str(tmp_path)]) == 2
    assert "compute.base_compute" in capsys.readouterr().err

    extra = dict(CONFIG, colour="red")
    assert main(["simulate", str(write_config(tmp_path, extra)), "--out", str(tmp_path)]) == 2
    assert "colour" in capsys.readouterr().err

    p = tmp_path / "broken.json"
    p.write_text('{"seed": 1,\n  "horizon": }')
    assert main(["simulate", str(p)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_config_is_bad_input(tmp_path):
    assert main(["simulate", str(tmp_path / "nope.json")]) == 2


def trace_file(tmp_path, times):
    topo = ParallelTopology.build(1, 2, 2, gpus_per_node=1)
    model = TrafficModel(layers=8, hidden=1024, heads=8, head_dim=128, vocab=0, context=1024, num_micro_batches=4)
    scn = ClusterScenario(topo, model, 0.05, (), len(times), noise=0.0)
    p = tmp_path / "trace.csv"
    write_trace(p, emit_trace(scn, times=times))
    return p


def test_detect_healthy_trace(tmp_path, capsys):
    rng = np.random.default_rng(0)
    times = list(1.0 + rng.normal(0, 0.005, 150))
    assert main(["detect", str(trace_file(tmp_path, times))]) == 0
    assert capsys.readouterr().out == ""


def test_detect_one_event_per_rank(tmp_path, capsys):
    rng = np.random.default_rng(1)
    times = 1.0 + rng.normal(0, 0.005, 150)
    times[50:80] *= 1.3
    assert main(["detect", str(trace_file(tmp_path, list(times))), "--out", str(tmp_path / "o")]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert sorted(r["rank"] for r in rows) == [0, 1, 2, 3]
    for r in rows:
        assert abs(r["onset_iter"] - 50) <= 5 and abs(r["recovery_iter"] - 80) <= 5
        assert r["severity"] == pytest.approx(1.3, abs=0.03)
    assert len((tmp_path / "o" / "events.jsonl").read_text().splitlines()) == 4


def test_detect_empty_and_garbled(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["detect", str(empty)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("rank,timestamp_s,kind,group,bytes\n0,abc,send,1,2\n")
    assert main(["detect", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_detect_trace_requires_data():
    from failslow.errors import InsufficientDataError

    with pytest.raises(InsufficientDataError):
        detect_trace({})


def test_schedule_ring(capsys):
    assert main(["schedule", "ring", "4"]) == 0
    assert capsys.readouterr().out.count("pass ") == 2
    assert main(["schedule", "ring", "5"]) == 0
    assert capsys.readouterr().out.count("pass ") == 3
    assert main(["schedule", "ring", "1"]) == 2
    assert main(["schedule", "ring", "x"]) == 2


def test_schedule_tree(tmp_path, capsys):
    good = tmp_path / "t.txt"
    good.write_text("0 -\n1 0\n2 0\n3 1\n")
    assert main(["schedule", "tree", str(good)]) == 0
    assert capsys.readouterr().out.count("pass ") == 4
    cyc = tmp_path / "c.txt"
    cyc.write_text("0 -\n1 2\n2 1\n")
    assert main(["schedule", "tree", str(cyc)]) == 2
    assert "cycle" in capsys.readouterr().err


def test_plan_microbatch(capsys):
    assert main(["plan", "microbatch", "--total", "4", "--times", "1,3"]) == 0
    assert json.loads(capsys.readouterr().out) == {"makespan_s": 3.0, "plan": [3, 1]}
    assert main(["plan", "microbatch", "--total", "1", "--times", "1,3"]) == 2


def test_plan_consolidate(capsys):
    args = ["plan", "consolidate", "--dp", "2", "--pp", "4", "--gpus-per-node", "1", "--stragglers", "0,7"]
    assert main(args) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["stages_before"] == [0, 3] and got["stages_after"] == [1]
    assert main(args[:-1] + ["0,99"]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 2
