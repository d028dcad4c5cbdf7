"""Command-line entry point.

    failslow simulate CONFIG [--mitigate on|off] [--seed N] [--out DIR] [--trace]
    failslow detect TRACE [--out DIR]
    failslow schedule ring N | tree FILE
    failslow plan microbatch --total M --times 1,2,3
    failslow plan consolidate --tp T --dp D --pp P --stragglers 0,5
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .closedloop import Timeline, run_closed_loop, slowdown_reduction
from .config import load_config
from .detector import detect_failslow, detect_period, iteration_times, signature_codes
from .errors import FailSlowError, InsufficientDataError, InvalidInputError, TraceFormatError
from .locator import parse_tree, ring_schedule, tree_schedule
from .mitigator import consolidate_stragglers, solve_microbatch, straggler_stages
from .model import ParallelTopology, read_trace, write_trace
from .reports import atomic_write_text, dumps, write_jsonl
from .sim import emit_trace

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def _write_arm(out: Path, prefix: str, tl: Timeline) -> None:
    write_jsonl(out / f"{prefix}timeline.jsonl", [r.to_dict() for r in tl.records])
    write_jsonl(out / f"{prefix}events.jsonl", [i.to_dict() for i in tl.incidents])
    write_jsonl(out / f"{prefix}actions.jsonl", [a.to_dict() for a in tl.actions])


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scn = cfg.build_scenario(seed=args.seed)
    det = cfg.detector_config()
    out = Path(args.out if args.out is not None else cfg.output.dir)

    baseline = run_closed_loop(scn, det, cfg.mitigator_config(enabled=False))
    summary = {
        "seed": scn.seed,
        "horizon": scn.horizon,
        "mitigate": args.mitigate,
        "failslow": baseline.summary(),
    }
    if args.mitigate == "on":
        mitigated = run_closed_loop(scn, det, cfg.mitigator_config(enabled=True))
        _write_arm(out, "", mitigated)
        _write_arm(out, "baseline_", baseline)
        summary["mitigated"] = mitigated.summary()
        summary["actions"] = [a.strategy for a in mitigated.actions]
        summary["slowdown_reduction_pct"] = slowdown_reduction(summary["failslow"], summary["mitigated"])
    else:
        _write_arm(out, "", baseline)
    summary["healthy"] = {
        "jct_s": summary["failslow"]["healthy_jct_s"],
        "throughput_iter_per_s": summary["failslow"]["healthy_throughput_iter_per_s"],
    }
    if args.trace or cfg.output.trace:
        write_trace(out / "trace.csv", emit_trace(scn, times=baseline.times))
    atomic_write_text(out / "summary.json", json.dumps(json.loads(dumps(summary)), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}/summary.json")
    s = summary["failslow"]
    print(f"fail-slow slowdown {s['slowdown_pct']:.1f}%")
    if "mitigated" in summary:
        print(f"mitigated slowdown {summary['mitigated']['slowdown_pct']:.1f}%")
        red = summary["slowdown_reduction_pct"]
        print("slowdown reduction " + ("n/a" if red is None else f"{red:.1f}%"))
    return EXIT_OK


def detect_trace(trace, window: int = 20, period_threshold: float = 0.95) -> List[dict]:
    """Period -> iteration times -> BOCD with verification, per rank."""
    if not trace:
        raise InsufficientDataError("trace has no calls")
    out = []
    for rank in sorted(trace):
        calls = trace[rank]
        codes = signature_codes(calls)
        period = detect_period(codes, threshold=period_threshold)
        if period is None:
            raise InsufficientDataError(f"rank {rank}: no periodic call pattern found")
        series = iteration_times(calls, period, rank=rank)
        if len(series) < 2:
            raise InsufficientDataError(f"rank {rank}: fewer than two iterations")
        for ev in detect_failslow(series, window=window):
            out.append(
                {
                    "rank": rank,
                    "period": period,
                    "onset_iter": ev.onset_iter,
                    "recovery_iter": ev.recovery_iter,
                    "severity": ev.severity,
                    "t_healthy_s": ev.t_healthy,
                }
            )
    return out


def cmd_detect(args) -> int:
    events = detect_trace(read_trace(args.trace), window=args.window)
    for e in events:
        print(dumps(e))
    if args.out:
        write_jsonl(Path(args.out) / "events.jsonl", events)
    print(f"{len(events)} events", file=sys.stderr)
    return EXIT_OK


def cmd_schedule(args) -> int:
    if args.shape == "ring":
        try:
            n = int(args.arg)
        except ValueError:
            raise InvalidInputError(f"ring size must be an integer, got {args.arg!r}") from None
        sched = ring_schedule(n)
    else:
        try:
            text = Path(args.arg).read_text()
        except OSError as exc:
            raise InvalidInputError(f"cannot read tree file {args.arg}: {exc.strerror}") from None
        sched = tree_schedule(parse_tree(text))
    sys.stdout.write(sched.to_text())
    return EXIT_OK


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidInputError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidInputError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_plan(args) -> int:
    if args.what == "microbatch":
        times = _float_list(args.times)
        plan = solve_microbatch(args.total, times)
        print(dumps({"plan": list(plan.m), "makespan_s": plan.makespan(times)}))
    else:
        topo = ParallelTopology.build(args.tp, args.dp, args.pp, args.gpus_per_node)
        gpus = _int_list(args.stragglers)
        res = consolidate_stragglers(gpus, topo)
        print(
            dumps(
                {
                    "stages_before": straggler_stages(topo, gpus),
                    "stages_after": list(res.stages),
                    "placement": [list(p) for p in res.placement],
                }
            )
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="failslow", description="Fail-slow detection and mitigation lab.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="run a scenario with and/or without mitigation")
    p.add_argument("config")
    p.add_argument("--mitigate", choices=("on", "off"), default="on")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--trace", action="store_true", help="also write the unmitigated call trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="find fail-slow events in a call trace CSV")
    p.add_argument("trace")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("schedule", help="print a link validation schedule")
    p.add_argument("shape", choices=("ring", "tree"))
    p.add_argument("arg", help="ring size or tree file")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("plan", help="run a mitigation planner on ad-hoc inputs")
    psub = p.add_subparsers(dest="what", required=True)
    q = psub.add_parser("microbatch")
    q.add_argument("--total", type=int, required=True)
    q.add_argument("--times", required=True, help="per-group micro-batch seconds, comma-separated")
    q = psub.add_parser("consolidate")
    q.add_argument("--tp", type=int, default=1)
    q.add_argument("--dp", type=int, required=True)
    q.add_argument("--pp", type=int, required=True)
    q.add_argument("--gpus-per-node", type=int, default=None)
    q.add_argument("--stragglers", required=True)
    p.set_defaults(func=cmd_plan)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, InsufficientDataError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FailSlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
