"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even
under capture) or directly with ``python3 tests/test_acceptance.py``.
"""

import itertools
import json
import math
import random
import sys
import time
from itertools import combinations

import numpy as np
import pytest

from failslow.cli import main as cli_main
from failslow.closedloop import MitigatorConfig, run_closed_loop, slowdown_reduction
from failslow.detector import OnlineDetector, acf, detect_period, pair_events, slide_window_detect
from failslow.locator import ring_schedule, tree_schedule
from failslow.mitigator import (
    OverheadConfig,
    Strategy,
    consolidate_stragglers,
    planner_step,
    solve_microbatch,
    start_planner,
    straggler_stages,
)
from failslow.model import ParallelTopology, TrafficModel
from failslow.sim import ClusterScenario, InjectionEvent, iteration_time
from failslow.synthetic import suite


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")

    return emit


# -- 1. detection accuracy -------------------------------------------------


def test_criterion_1_detection_accuracy(report):
    t0 = time.perf_counter()
    series = suite(0)
    fp_v = fp_raw = 0
    steps = step_hit = 0
    worst_report = worst_locate = 0
    ramp_v = ramp_sw = nramp = 0
    for s in series:
        det = OnlineDetector()
        reported = None
        for i, v in enumerate(s.values):
            for cp in det.update(v):
                if reported is None and s.onset is not None and cp.direction == "degrade" and cp.index >= s.onset:
                    reported = (i, cp.index)
        det.flush()
        events = pair_events(det.changepoints)
        if s.kind in ("clean", "jitter"):
            fp_v += len(events)
            fp_raw += len(det.candidates)
        elif s.kind == "step" and s.magnitude >= 0.15:
            steps += 1
            if reported is not None:
                rep_lat, loc_lat = reported[0] - s.onset, reported[1] - s.onset
                worst_report = max(worst_report, rep_lat)
                worst_locate = max(worst_locate, loc_lat)
                step_hit += rep_lat <= 10 and loc_lat <= 10
        elif s.kind == "ramp":
            nramp += 1
            ramp_v += not any(e.onset_iter >= s.onset - 5 for e in events)
            ramp_sw += not any(e.onset_iter >= s.onset - 5 for e in slide_window_detect(s.values))
    elapsed = time.perf_counter() - t0
    ok = (
        len(series) == 500
        and fp_v == 0
        and step_hit == steps
        and fp_raw > fp_v
        and ramp_sw > ramp_v
        and elapsed < 30
    )
    report(
        1, ok,
        f"series=500 FP(bocd+verify)={fp_v} FP(raw bocd)={fp_raw} "
        f"steps>=15% detected {step_hit}/{steps} (max report lag {worst_report}, max onset error {worst_locate}) "
        f"ramp misses bocd+verify={ramp_v}/{nramp} slidewindow={ramp_sw}/{nramp} time={elapsed:.1f}s",
    )
    assert ok


# -- 2. period detection ---------------------------------------------------


def minimal_period(b):
    p = len(b)
    for k in range(1, p + 1):
        if p % k == 0 and all(b[i] == b[i % k] for i in range(p)):
            return k


def random_block(rng, p, alphabet):
    if p == 1:
        return [int(rng.integers(0, alphabet))]
    while True:
        b = [int(v) for v in rng.integers(0, alphabet, p)]
        if minimal_period(b) == p:
            return b


def test_criterion_2_period_detection(report):
    t0 = time.perf_counter()
    L = 4000
    fails, checked, worst = [], 0, 1.0
    for p in range(1, 33):
        for a in (2, 3, 4, 8, 16):
            for seed in range(5):
                rng = np.random.default_rng([p, a, seed])
                x = np.array(random_block(rng, p, a) * (L // p + 1))[:L]
                checked += 1
                if detect_period(x) != p:
                    fails.append(("clean", p, a, seed))
                if p <= 16:
                    y = x.copy()
                    hit = rng.random(L) < 0.01
                    # a corrupted slot holds some other call from the same rank
                    y[hit] = rng.choice(x, hit.sum())
                    checked += 1
                    got = detect_period(y)
                    if p > 1:
                        worst = min(worst, acf(y, p))
                    if got != p:
                        fails.append(("corrupt", p, a, seed, got))
    elapsed = time.perf_counter() - t0
    ok = not fails and elapsed < 10
    report(2, ok, f"traces={checked} failures={len(fails)} {fails[:3]} min corrupted ACF at p={worst:.3f} time={elapsed:.1f}s")
    assert ok


# -- 3. validation schedules -----------------------------------------------


def cover_check(passes, vertices, edges):
    """Every vertex pair counted against the wanted link set; every pass a matching."""
    want = {frozenset(e) for e in edges}
    counts = {frozenset(pr): 0 for pr in combinations(sorted(vertices), 2)}
    for ps in passes:
        used = [v for pr in ps for v in pr]
        if len(used) != len(set(used)):
            return False
        for a, b in ps:
            counts[frozenset((a, b))] += 1
    return all(c == (1 if k in want else 0) for k, c in counts.items())


def random_tree(rng, n):
    labels = list(range(n))
    rng.shuffle(labels)
    parent = {labels[0]: None}
    slots = [labels[0]] * 2
    for v in labels[1:]:
        p = slots.pop(rng.randrange(len(slots)))
        parent[v] = p
        slots += [v, v]
    return parent


def test_criterion_3_validation_schedules(report):
    t0 = time.perf_counter()
    bad = []
    for n in range(2, 65):
        s = ring_schedule(n)
        edges = [(0, 1)] if n == 2 else [(i, (i + 1) % n) for i in range(n)]
        want = 1 if n == 2 else 2 if n % 2 == 0 else 3
        if len(s) != want or not cover_check(s.passes, range(n), edges):
            bad.append(("ring", n))
    rng = random.Random(0)
    for i in range(200):
        parent = random_tree(rng, rng.randint(2, 64))
        s = tree_schedule(parent)
        edges = [(c, p) for c, p in parent.items() if p is not None]
        if len(s) != 4 or not cover_check(s.passes, parent, edges):
            bad.append(("tree", i))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 5
    report(3, ok, f"rings 2..64 + 200 trees, failures={bad[:5]} time={elapsed:.2f}s")
    assert ok


# -- 4. micro-batch solver -------------------------------------------------


def enumerate_makespan(M, times):
    best = math.inf
    D = len(times)
    for cuts in itertools.combinations(range(1, M), D - 1):
        b = (0,) + cuts + (M,)
        best = min(best, max((b[i + 1] - b[i]) * times[i] for i in range(D)))
    return best


def optimal_makespan(M, times):
    """Smallest integer C with sum(floor(C / t)) >= M and C >= max t."""
    t = np.asarray(times, dtype=np.int64)
    lo, hi = int(t.max()), int(M * t.min())
    hi = max(hi, lo)
    while lo < hi:
        mid = (lo + hi) // 2
        if int((mid // t).sum()) >= M:
            hi = mid
        else:
            lo = mid + 1
    return lo


def test_criterion_4_microbatch_solver(report):
    t0 = time.perf_counter()
    exact = mismatch = 0
    for D in range(1, 5):
        for times in itertools.product(range(1, 5), repeat=D):
            for M in range(D, 13):
                exact += 1
                if solve_microbatch(M, times).makespan(times) != enumerate_makespan(M, times):
                    mismatch += 1
    rng = np.random.default_rng(4)
    worse = 0
    for _ in range(10_000):
        D = int(rng.integers(5, 65))
        M = int(rng.integers(D, 8 * D + 1))
        times = [int(v) for v in rng.integers(1, 101, D)]
        plan = solve_microbatch(M, times)
        assert plan.total == M and min(plan.m) >= 1
        worse += plan.makespan(times) > optimal_makespan(M, times)
    elapsed = time.perf_counter() - t0
    ok = mismatch == 0 and worse == 0 and elapsed < 60
    report(4, ok, f"enumerated {exact} instances, mismatches={mismatch}; 10000 random, greedy>oracle={worse} time={elapsed:.1f}s")
    assert ok


# -- 5. ski-rental planner -------------------------------------------------


def costs_by_duration(e, O, horizon):
    """Online cost for every fail-slow duration 1..horizon from one run.

    The planner only sees the past, so the first T steps of a long event
    are exactly an event of length T."""
    ladder = [Strategy("S1", 0.0), Strategy("S4", float(O))]
    state, _ = start_planner(None, ladder, t_healthy=1.0)
    fired, paid, costs = None, 0.0, []
    for i in range(1, horizon + 1):
        x = 1.0 if fired else 1.0 + e  # S4 swaps in healthy hardware
        paid += x - 1.0
        state, act = planner_step(state, x)
        if act is not None:
            fired = i
            paid += act.overhead
        costs.append(paid)
    return costs, fired


def independent_cost(e, O, T):
    ladder = [Strategy("S1", 0.0), Strategy("S4", float(O))]
    state, _ = start_planner(None, ladder, t_healthy=1.0)
    paid, fired = 0.0, False
    for _ in range(T):
        x = 1.0 if fired else 1.0 + e
        paid += x - 1.0
        state, act = planner_step(state, x)
        if act is not None:
            fired = True
            paid += act.overhead
    return paid


def test_criterion_5_ski_rental(report):
    t0 = time.perf_counter()
    H = 10_000
    bad = []
    cases = 0
    for e in (0.125, 0.25, 0.5, 1.0, 2.0):
        for O in (1, 7, 60, 600, 5000):
            cases += 1
            costs, fired = costs_by_duration(e, O, H)
            k = math.ceil(O / e)
            if fired != (k if k <= H else None):
                bad.append(("break-even", e, O, fired))
            for T, c in enumerate(costs, 1):
                if c > 2 * min(T * e, O) + e + 1e-9:
                    bad.append(("ratio", e, O, T, c))
                    break
            for T in (1, 2, k - 1, k, k + 1, H // 3, H):
                if 1 <= T <= H and independent_cost(e, O, T) != costs[T - 1]:
                    bad.append(("prefix", e, O, T))
    elapsed = time.perf_counter() - t0
    ok = not bad
    report(5, ok, f"{cases} (excess, overhead) pairs x T=1..{H}, violations={bad[:3]} time={elapsed:.1f}s")
    assert ok


# -- 6. consolidation ordering ---------------------------------------------

SMALL = TrafficModel(layers=8, hidden=1024, heads=8, head_dim=128, vocab=0, context=1024, num_micro_batches=4)


def test_criterion_6_consolidation(report):
    t0 = time.perf_counter()
    rng = random.Random(6)
    bad = []
    for i in range(50):
        D, P = rng.randint(2, 4), rng.randint(2, 6)
        topo = ParallelTopology.build(1, D, P, gpus_per_node=1)
        S = rng.randint(1, D * P)
        slow = rng.sample(range(D * P), S)
        scn = ClusterScenario(topo, SMALL, 0.05, (), 1, gpu_speed={g: 0.5 for g in slow})
        scattered = iteration_time(scn, 0).time
        plan = consolidate_stragglers(slow, topo)
        merged = iteration_time(scn, 0, topo=plan.topology).time
        stages = straggler_stages(plan.topology, slow)
        if merged > scattered + 1e-12 or len(stages) != math.ceil(S / D):
            bad.append((i, D, P, S, scattered, merged, stages))
    elapsed = time.perf_counter() - t0
    ok = not bad
    report(6, ok, f"50 straggler sets, consolidated<=scattered and stages==ceil(S/G): failures={bad[:2]} time={elapsed:.2f}s")
    assert ok


# -- 7. closed loop --------------------------------------------------------


def desk_scenario(injection):
    topo = ParallelTopology.build(1, 4, 4, gpus_per_node=4)
    model = TrafficModel(layers=24, hidden=2048, heads=16, head_dim=128, vocab=50000, context=2048, num_micro_batches=8)
    return ClusterScenario(topo, model, 0.05, (injection,), horizon=800, seed=1)


def arms(scn, cfg):
    t0 = time.perf_counter()
    base = run_closed_loop(scn, mitigator=MitigatorConfig(enabled=False))
    t1 = time.perf_counter()
    mit = run_closed_loop(scn, mitigator=cfg)
    t2 = time.perf_counter()
    return base, mit, max(t1 - t0, t2 - t1)


def test_criterion_7_closed_loop(report):
    gpu = desk_scenario(InjectionEvent("gpu_slowdown", 5, 0.5, 100, 700))
    b1, m1, s1 = arms(gpu, MitigatorConfig())
    r1 = slowdown_reduction(b1.summary(), m1.summary())
    # topology change cost scaled to desk-size iterations (~0.6 s each)
    link = desk_scenario(InjectionEvent("link_congestion", (1, 2), 0.02, 100, 700))
    b2, m2, s2 = arms(link, MitigatorConfig(overheads=OverheadConfig(topology_seconds=10.0)))
    r2 = slowdown_reduction(b2.summary(), m2.summary())
    used_s3 = any(a.strategy == "S3" and not a.params.get("noop") for a in m2.actions)
    ok = r1 is not None and r1 >= 50 and r2 is not None and r2 >= 20 and used_s3 and max(s1, s2) < 10
    report(
        7, ok,
        f"straggler: {b1.summary()['slowdown_pct']}% -> {m1.summary()['slowdown_pct']}% "
        f"(reduction {r1}%, actions {[a.strategy for a in m1.actions]}); "
        f"link: {b2.summary()['slowdown_pct']}% -> {m2.summary()['slowdown_pct']}% "
        f"(reduction {r2}%, actions {[a.strategy for a in m2.actions]}); slowest arm {max(s1, s2):.2f}s",
    )
    assert ok


# -- 8. determinism --------------------------------------------------------

CONFIG = {
    "seed": 11,
    "horizon": 300,
    "topology": {"tp": 1, "dp": 2, "pp": 2, "gpus_per_node": 1},
    "model": {
        "layers": 8, "hidden": 1024, "heads": 8, "head_dim": 128,
        "vocab": 0, "context": 1024, "num_micro_batches": 4,
    },
    "compute": {"base_compute": 0.05},
    "injections": [
        {"kind": "gpu_slowdown", "target": 2, "factor": 0.6, "start": 60, "end": 200},
        {"kind": "link_congestion", "target": [0, 1], "factor": 0.2, "start": 120, "end": 260},
    ],
}


def test_criterion_8_determinism(tmp_path, report):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["simulate", str(cfg), "--seed", "5", "--out", str(out), "--trace"]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0] == outs[1]
    ok = same and len(outs[0]) >= 8
    report(8, ok, f"two simulate runs, {len(outs[0])} files, byte-identical={same}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
