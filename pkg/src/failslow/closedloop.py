"""Detector, locator and mitigator wired against the simulator.

Every iteration the detector sees the (noisy) iteration time. A verified
degradation is localized and opens an incident with its own escalation
planner; planner actions change the live micro-batch plan or placement, or
restart the job on replaced hardware. Pauses count toward job completion
time but are invisible to the detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from .detector import (
    CHANGE_THRESHOLD,
    HAZARD_LAMBDA,
    JITTER_THRESHOLD,
    PERIOD_THRESHOLD,
    VERIFY_WINDOW,
    ChangePoint,
    OnlineDetector,
)
from .errors import InvalidInputError
from .locator import (
    SUSPICION_FACTOR,
    Located,
    busy_groups,
    classify_groups,
    localize,
    ring_schedule,
    tree_schedule,
)
from .mitigator import (
    STRATEGY_IDS,
    MitigationState,
    MicrobatchPlan,
    OverheadConfig,
    Strategy,
    consolidate_stragglers,
    even_split,
    find_strategies,
    plan_topology_swap,
    planner_step,
    solve_microbatch,
    start_planner,
    straggler_stages,
    strategy_overheads,
)
from .model import FailSlowEvent, Link, ParallelTopology, comm_volumes
from .sim import (
    ClusterScenario,
    IterationResult,
    gemm_benchmark,
    iteration_time,
    link_bandwidths,
    p2p_benchmark,
)


@dataclass(frozen=True)
class DetectorConfig:
    period_threshold: float = PERIOD_THRESHOLD
    threshold: float = CHANGE_THRESHOLD
    hazard_lambda: float = HAZARD_LAMBDA
    jitter: float = JITTER_THRESHOLD
    window: int = VERIFY_WINDOW


@dataclass(frozen=True)
class MitigatorConfig:
    enabled: bool = True
    ladder: Tuple[str, ...] = STRATEGY_IDS
    overheads: OverheadConfig = OverheadConfig()
    gemm_work: float = 1.0  # seconds at full speed
    p2p_bytes: float = 64e6

    def __post_init__(self):
        bad = [s for s in self.ladder if s not in STRATEGY_IDS]
        if bad:
            raise InvalidInputError(f"unknown strategies {bad}")


@dataclass(frozen=True)
class IterRecord:
    iter: int
    time_s: float
    pause_s: float
    healthy_time_s: float
    active_events: Tuple[int, ...]
    active_strategy: Optional[str]

    def to_dict(self) -> dict:
        return {
            "iter": self.iter,
            "time_s": self.time_s,
            "pause_s": self.pause_s,
            "healthy_time_s": self.healthy_time_s,
            "active_events": list(self.active_events),
            "active_strategy": self.active_strategy,
        }


@dataclass(frozen=True)
class ActionRecord:
    strategy: str
    iteration: int
    accumulated_impact: float
    incident: int
    params: dict

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "iteration": self.iteration,
            "accumulated_impact_s": self.accumulated_impact,
            "incident": self.incident,
            "params": self.params,
        }


@dataclass
class Incident:
    id: int
    event: FailSlowEvent
    gpus: FrozenSet[int]
    links: FrozenSet[Link]
    planner: Optional[MitigationState] = None

    @property
    def components(self) -> Set:
        return {("gpu", g) for g in self.gpus} | {("link", lk) for lk in self.links}

    def to_dict(self) -> dict:
        e = self.event
        return {
            "id": self.id,
            "onset_iter": e.onset_iter,
            "recovery_iter": e.recovery_iter,
            "kind": e.kind,
            "located": {"gpus": sorted(self.gpus), "links": [list(lk) for lk in sorted(self.links)]},
            "severity": e.severity,
            "t_healthy_s": e.t_healthy,
        }


@dataclass
class Timeline:
    records: List[IterRecord]
    incidents: List[Incident]
    actions: List[ActionRecord]
    changepoints: List[ChangePoint] = field(default_factory=list)

    @property
    def times(self) -> List[float]:
        return [r.time_s for r in self.records]

    @property
    def events(self) -> List[FailSlowEvent]:
        return [i.event for i in self.incidents]

    def summary(self) -> dict:
        return summarize(self.records)


def summarize(records: Sequence[IterRecord]) -> dict:
    """Metrics recomputable from the timeline records alone."""
    n = len(records)
    jct = sum(r.time_s + r.pause_s for r in records)
    healthy = sum(r.healthy_time_s for r in records)
    slowdown = jct / healthy - 1.0
    return {
        "iterations": n,
        "jct_s": jct,
        "healthy_jct_s": healthy,
        "jct_ratio": jct / healthy,
        "slowdown_pct": round(100.0 * slowdown, 1),
        "throughput_iter_per_s": n / jct,
        "healthy_throughput_iter_per_s": n / healthy,
        "pause_s": sum(r.pause_s for r in records),
    }


def slowdown_reduction(baseline: dict, mitigated: dict) -> Optional[float]:
    """Percent of the unmitigated slowdown removed by mitigation."""
    base = baseline["jct_s"] / baseline["healthy_jct_s"] - 1.0
    if base <= 0:
        return None
    mit = mitigated["jct_s"] / mitigated["healthy_jct_s"] - 1.0
    return round(100.0 * (1.0 - mit / base), 1)


# ---------------------------------------------------------------------------
# Localization against the live simulator
# ---------------------------------------------------------------------------


def _replica_gpus(topo: ParallelTopology, d: int) -> List[int]:
    return [topo.gpu_of(topo.rank_of(t, d, p)) for p in range(topo.pp) for t in range(topo.tp)]


def validation_pairs(topo: ParallelTopology, group) -> List[Tuple[int, int]]:
    """P2P pairs exercising every link of one DP ring or PP chain."""
    kind, gi = group
    if kind == "dp":
        ranks = topo.dp_groups()[gi]
        return ring_schedule(len(ranks)).relabel(ranks).pairs if len(ranks) > 1 else []
    chain = topo.pp_groups()[gi]
    if len(chain) < 2:
        return []
    parent = {chain[0]: None}
    parent.update({c: p for p, c in zip(chain, chain[1:])})
    return tree_schedule(parent).pairs


def locate(
    scn: ClusterScenario,
    it: int,
    res: IterationResult,
    topo: ParallelTopology,
    voided: FrozenSet[int],
    cfg: MitigatorConfig,
) -> Located:
    """Profile groups, validate the suspicious ones, flag slow components."""
    dp = [p for p in res.profiles if p.group[0] == "dp"]
    pp = [p for p in res.profiles if p.group[0] == "pp"]
    comm = (classify_groups(dp) if dp else []) + (classify_groups(pp) if pp else [])
    busy = busy_groups(pp) if pp else []
    if not comm and not busy:
        # nothing stands out: validate everything
        comm = [p.group for p in dp + pp]
        busy = [p.group for p in pp]
    gpus = sorted({g for _, gi in busy for g in _replica_gpus(topo, gi // topo.tp)})
    pairs = [pr for g in comm for pr in validation_pairs(topo, g)]
    compute = gemm_benchmark(scn, it, gpus, cfg.gemm_work, voided)
    links = p2p_benchmark(scn, it, pairs, topo, cfg.p2p_bytes, voided)
    link_base = None
    if len(links) == 1:
        (lk,) = links
        link_base = cfg.p2p_bytes / topo.links[lk]
    return localize(compute, links, cfg.gemm_work, link_base)


def _still_slow(scn, it, topo, voided, cfg, inc: Incident) -> bool:
    """Re-run the benchmarks on an incident's components against healthy baselines."""
    gemm = gemm_benchmark(scn, it, inc.gpus, cfg.gemm_work, voided)
    if any(v > SUSPICION_FACTOR * cfg.gemm_work for v in gemm.values()):
        return True
    bw = link_bandwidths(scn, it, voided)
    return any(
        cfg.p2p_bytes / bw[lk] > SUSPICION_FACTOR * cfg.p2p_bytes / topo.links[lk] for lk in inc.links
    )


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


def run_closed_loop(
    scn: ClusterScenario,
    detector: DetectorConfig = DetectorConfig(),
    mitigator: MitigatorConfig = MitigatorConfig(),
) -> Timeline:
    noise = scn.noise_factors()
    healthy = scn.healthy()
    topo = scn.topo
    D, M = topo.dp, scn.global_micro_batches
    plan = even_split(M, D)
    voided: FrozenSet[int] = frozenset()
    volumes = comm_volumes(scn.model, topo)
    overheads = strategy_overheads(scn.model, replace(mitigator.overheads, dp_groups=D))
    overheads = {k: v for k, v in overheads.items() if k in mitigator.ladder}
    det = OnlineDetector(detector.window, detector.threshold, detector.hazard_lambda, detector.jitter)

    times: List[float] = []
    records: List[IterRecord] = []
    incidents: List[Incident] = []
    actions: List[ActionRecord] = []
    s2_live = False

    for it in range(scn.horizon):
        res = iteration_time(scn, it, plan, topo, voided)
        t = res.time * float(noise[it])
        h = iteration_time(healthy, it).time * float(noise[it])
        times.append(t)
        pause = 0.0
        is_open = [i for i in incidents if i.event.is_open]

        for cp in det.update(t):
            if cp.direction == "degrade":
                loc = locate(scn, it, res, topo, voided, mitigator)
                covered = set().union(*(i.components for i in is_open)) if is_open else set()
                gpus = frozenset(g for g in loc.gpus if ("gpu", g) not in covered)
                links = frozenset(lk for lk in loc.links if ("link", lk) not in covered)
                if not (gpus or links) and is_open:
                    for inc in is_open:
                        sev = max(inc.event.severity, cp.mean_after / inc.event.t_healthy)
                        inc.event = replace(inc.event, severity=sev)
                    continue
                kind = Located(tuple(sorted(gpus)), tuple(sorted(links))).kind
                event = FailSlowEvent(
                    cp.index, None, kind,
                    tuple(sorted(gpus)) + tuple(sorted(links)),
                    max(1.0, cp.ratio), cp.mean_before,
                )
                inc = Incident(len(incidents), event, gpus, links)
                incidents.append(inc)
                is_open.append(inc)
                if mitigator.enabled:
                    impact = sum(max(0.0, x - cp.mean_before) for x in times[cp.index :])
                    inc.planner, act = start_planner(
                        event, find_strategies(kind, overheads), cp.mean_before, impact
                    )
                    if act is not None:
                        plan, topo, voided, s2_live, extra = _apply(
                            act, inc, it, res, scn, plan, topo, voided, s2_live,
                            volumes, mitigator, incidents, actions,
                        )
                        pause += extra
            else:
                for inc in is_open:
                    if inc.components:
                        done = not _still_slow(scn, it, topo, voided, mitigator, inc)
                    else:
                        done = cp.mean_after <= inc.event.t_healthy * (1.0 + detector.jitter)
                    if done:
                        inc.event = replace(inc.event, recovery_iter=cp.index)
                is_open = [i for i in incidents if i.event.is_open]

        # a mitigated component can heal without a visible level change
        for inc in incidents:
            if (
                inc.event.is_open
                and inc.components
                and (it - inc.event.onset_iter) % detector.window == 0
                and it > inc.event.onset_iter
                and not _still_slow(scn, it, topo, voided, mitigator, inc)
            ):
                inc.event = replace(inc.event, recovery_iter=it)

        if mitigator.enabled:
            for inc in [i for i in incidents if i.event.is_open and i.planner is not None]:
                if inc.event.onset_iter >= it or not inc.event.is_open:
                    continue
                inc.planner, act = planner_step(inc.planner, t)
                if act is not None:
                    plan, topo, voided, s2_live, extra = _apply(
                        act, inc, it, res, scn, plan, topo, voided, s2_live,
                        volumes, mitigator, incidents, actions,
                    )
                    pause += extra
            if s2_live:
                cur = iteration_time(scn, it, plan, topo, voided)
                new = solve_microbatch(M, cur.micro_batch_times)
                if new != plan:
                    plan = new

        open_now = [i for i in incidents if i.event.is_open]
        strat = None
        for i in open_now:
            if i.planner is not None and i.planner.current is not None:
                s = i.planner.current.id
                strat = s if strat is None or s > strat else strat
        if open_now and strat is None:
            strat = "S1"
        records.append(IterRecord(it, t, pause, h, tuple(i.id for i in open_now), strat))

    return Timeline(records, incidents, actions, list(det.changepoints))


def _apply(
    act: Strategy,
    inc: Incident,
    it: int,
    res: IterationResult,
    scn: ClusterScenario,
    plan: MicrobatchPlan,
    topo: ParallelTopology,
    voided: FrozenSet[int],
    s2_live: bool,
    volumes,
    cfg: MitigatorConfig,
    incidents: List[Incident],
    actions: List[ActionRecord],
):
    """Carry out one planner action; returns the new live state plus pause seconds."""
    pause = 0.0
    params: dict = {}
    if act.id == "S2":
        plan = solve_microbatch(scn.global_micro_batches, res.micro_batch_times)
        s2_live = True
        pause = act.overhead
        params = {"plan": list(plan.m)}
    elif act.id == "S3":
        live = [i for i in incidents if i.event.is_open]
        links = sorted({lk for i in live for lk in i.links})
        gpus = sorted({g for i in live for g in i.gpus})
        bw = link_bandwidths(scn, it, voided)
        congested = {lk: bw[lk] for lk in links}
        swap = plan_topology_swap(topo, congested, volumes)
        new = topo.relabel_nodes(swap.permutation) if not swap.noop else topo
        if len(gpus) > 1:
            cons = consolidate_stragglers(gpus, new)
            if len(cons.stages) < len(straggler_stages(new, gpus)):
                new = cons.topology
        changed = new.placement != topo.placement
        params = {
            "permutation": {str(k): v for k, v in sorted(swap.permutation.items())},
            "placement": [list(p) for p in new.placement],
            "noop": not changed,
        }
        if changed:
            topo = new
            pause = act.overhead
    elif act.id == "S4":
        voided = voided | {i for i, inj in enumerate(scn.injections) if inj.active(it)}
        plan = even_split(scn.global_micro_batches, topo.dp)
        s2_live = False
        pause = act.overhead
        params = {"replaced": sorted(voided)}
        for i in incidents:
            if i.event.is_open:
                i.event = replace(i.event, recovery_iter=max(it + 1, i.event.onset_iter + 1))
    actions.append(ActionRecord(act.id, it, inc.planner.accumulated_impact, inc.id, params))
    return plan, topo, voided, s2_live, pause
