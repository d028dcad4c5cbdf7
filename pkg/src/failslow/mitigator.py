"""Multi-level mitigation: the break-even escalation planner and the
strategies it escalates through.

    S1  ignore                      no overhead
    S2  rebalance micro-batches     solver time, computation only
    S3  adjust topology             pause + parameter swap
    S4  checkpoint and restart      dump + reload, eliminates the straggler
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import InvalidInputError
from .model import (
    CommVolumes,
    FailSlowEvent,
    Link,
    ParallelTopology,
    TrafficModel,
    link_id,
    param_count,
)

STRATEGY_IDS = ("S1", "S2", "S3", "S4")

# root causes each strategy helps with; S3/S4 also cover unlocated slowdowns
APPLICABILITY: Dict[str, FrozenSet[str]] = {
    "S1": frozenset({"computation", "communication", "unknown"}),
    "S2": frozenset({"computation"}),
    "S3": frozenset({"computation", "communication", "unknown"}),
    "S4": frozenset({"computation", "communication", "unknown"}),
}

# micro-batch solver time by number of DP groups
SOLVER_SECONDS = {16: 0.01, 32: 0.01, 64: 0.01, 128: 0.11, 256: 6.78, 512: 35.93}

@dataclass(frozen=True)
class Strategy:
    id: str
    overhead: float
    applicability: FrozenSet[str] = frozenset()

    def applies_to(self, cause: str) -> bool:
        return cause in self.applicability

# ---------------------------------------------------------------------------
# Overheads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverheadConfig:
    dp_groups: int = 1
    topology_seconds: float = 60.0
    # 200 GB of half-precision weights (a 100B model) in ~100 minutes
    storage_bandwidth: float = 2e11 / 6000.0
    restart_seconds: float = 0.0
    solver_seconds: Optional[float] = None

def solver_seconds(dp_groups: int) -> float:
    """Micro-batch solver time, log-interpolated over the measured table."""
    keys = sorted(SOLVER_SECONDS)
    if dp_groups <= keys[0]:
        return SOLVER_SECONDS[keys[0]]
    for lo, hi in zip(keys, keys[1:]):
        if dp_groups <= hi:
            f = math.log(dp_groups / lo) / math.log(hi / lo)
            a, b = math.log(SOLVER_SECONDS[lo]), math.log(SOLVER_SECONDS[hi])
            return math.exp(a + f * (b - a))
    lo, hi = keys[-2], keys[-1]
    growth = math.log(SOLVER_SECONDS[hi] / SOLVER_SECONDS[lo]) / math.log(hi / lo)
    return SOLVER_SECONDS[hi] * (dp_groups / hi) ** growth

def strategy_overheads(model: TrafficModel, config: OverheadConfig = OverheadConfig()) -> Dict[str, float]:
    """One-off action cost of each strategy, in seconds."""
    s2 = config.solver_seconds if config.solver_seconds is not None else solver_seconds(config.dp_groups)
    s4 = param_count(model) * model.element_bytes / config.storage_bandwidth + config.restart_seconds
    return {"S1": 0.0, "S2": s2, "S3": config.topology_seconds, "S4": s4}

def find_strategies(root_cause: str, overheads: Mapping[str, float]) -> List[Strategy]:
    """Strategies that can help with ``root_cause``, cheapest first."""
    if root_cause not in ("computation", "communication", "unknown"):
        raise InvalidInputError(f"unknown root cause {root_cause!r}")
    out = [
        Strategy(sid, float(overheads[sid]), APPLICABILITY[sid])
        for sid in STRATEGY_IDS
        if sid in overheads and root_cause in APPLICABILITY[sid]
    ]
    return sorted(out, key=lambda s: s.overhead)

# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MitigationState:
    event: Optional[FailSlowEvent]
    candidates: Tuple[Strategy, ...]
    index: int  # candidates[:index] have been applied
    accumulated_impact: float
    t_healthy: float
    t_slow: float = 0.0
    slow_iters: int = 0

    @property
    def current(self) -> Optional[Strategy]:
        return self.candidates[self.index - 1] if self.index else None

    @property
    def next(self) -> Optional[Strategy]:
        return self.candidates[self.index] if self.index < len(self.candidates) else None

    @property
    def exhausted(self) -> bool:
        return self.index >= len(self.candidates)

def start_planner(
    event: Optional[FailSlowEvent],
    candidates: Sequence[Strategy],
    t_healthy: float,
    impact: float = 0.0,
) -> Tuple[MitigationState, Optional[Strategy]]:
    """New planner; the first candidate fires at once if already paid for."""
    if t_healthy <= 0:
        raise InvalidInputError("t_healthy must be positive")
    cands = tuple(sorted(candidates, key=lambda s: s.overhead))
    state = MitigationState(event, cands, 0, float(impact), float(t_healthy))
    if cands and state.accumulated_impact >= cands[0].overhead:
        return replace(state, index=1), cands[0]
    return state, None

def planner_step(state: MitigationState, iter_time: float) -> Tuple[MitigationState, Optional[Strategy]]:
    """Charge one iteration's excess and escalate at the break-even point."""
    excess = max(0.0, iter_time - state.t_healthy)
    state = replace(
        state,
        accumulated_impact=state.accumulated_impact + excess,
        t_slow=float(iter_time),
        slow_iters=state.slow_iters + (excess > 0),
    )
    nxt = state.next
    if nxt is not None and state.accumulated_impact >= nxt.overhead:
        return replace(state, index=state.index + 1), nxt
    return state, None

# ---------------------------------------------------------------------------
# S2: micro-batch redistribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MicrobatchPlan:
    m: Tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.m)

    def makespan(self, times: Sequence[float]) -> float:
        return max(mi * ti for mi, ti in zip(self.m, times))

def even_split(M: int, D: int) -> MicrobatchPlan:
    q, r = divmod(M, D)
    return MicrobatchPlan(tuple(q + (i < r) for i in range(D)))

def solve_microbatch(M: int, times: Sequence[float]) -> MicrobatchPlan:
    """Integer split of ``M`` micro-batches minimizing the slowest group.

    Every group gets one micro-batch, then each remaining micro-batch goes
    to the group whose finishing time grows least (lowest index on ties).
    This greedy is optimal for identical jobs on machines of uniform speed.
    """
    D = len(times)
    if D == 0:
        raise InvalidInputError("need at least one DP group")
    if any(not t > 0 for t in times):
        raise InvalidInputError("per-group micro-batch times must be positive")
    if M < D:
        raise InvalidInputError(f"{M} micro-batches cannot cover {D} groups")
    m = [1] * D
    heap = [(2 * t, i) for i, t in enumerate(times)]
    heapq.heapify(heap)
    for _ in range(M - D):
        _, i = heapq.heappop(heap)
        m[i] += 1
        heapq.heappush(heap, ((m[i] + 1) * times[i], i))
    return MicrobatchPlan(tuple(m))

# ---------------------------------------------------------------------------
# S3: topology adjustment
# ---------------------------------------------------------------------------

def link_loads(topo: ParallelTopology, volumes: CommVolumes) -> Dict[Link, float]:
    """Bytes per iteration crossing each inter-node link under ``topo``."""
    loads: Dict[Link, float] = {}

    def add(r1, r2, nbytes):
        lk = topo.rank_link(r1, r2)
        if lk is not None:
            loads[lk] = loads.get(lk, 0.0) + nbytes

    if topo.dp > 1:
        for group in topo.dp_groups():
            edges = zip(group, group[1:] + group[:1]) if len(group) > 2 else [tuple(group)]
            for a, b in edges:
                add(a, b, volumes.dp_bytes)
    for chain in topo.pp_groups():
        for a, b in zip(chain, chain[1:]):
            add(a, b, volumes.pp_bytes)
    return loads

def congestion_objective(
    topo: ParallelTopology,
    volumes: CommVolumes,
    bandwidth: Optional[Mapping[Link, float]] = None,
) -> Tuple[float, float]:
    """(bottleneck link transfer time, total transfer time) in seconds."""
    bw = dict(topo.links)
    if bandwidth:
        bw.update({link_id(*k): v for k, v in bandwidth.items()})
    times = [nbytes / bw[lk] for lk, nbytes in link_loads(topo, volumes).items()]
    if not times:
        return 0.0, 0.0
    return max(times), sum(times)

@dataclass(frozen=True)
class SwapPlan:
    permutation: Dict[int, int]  # old node -> new node
    before: Tuple[float, float]
    after: Tuple[float, float]

    @property
    def noop(self) -> bool:
        return all(k == v for k, v in self.permutation.items())

def _better(a: Tuple[float, float], b: Tuple[float, float], rel: float = 1e-9) -> bool:
    if a[0] < b[0] * (1 - rel):
        return True
    return abs(a[0] - b[0]) <= rel * max(b[0], 1e-300) and a[1] < b[1] * (1 - rel)

def plan_topology_swap(
    topo: ParallelTopology,
    congested: Mapping[Link, float],
    volumes: CommVolumes,
    exhaustive: bool = False,
) -> SwapPlan:
    """Relabel nodes so heavy traffic avoids congested links.

    ``congested`` maps each degraded link to its measured bandwidth.
    Steepest-descent over pairwise node swaps by default; ``exhaustive``
    tries every permutation (small clusters only).
    """
    nodes = topo.nodes
    identity = {n: n for n in nodes}
    before = congestion_objective(topo, volumes, congested)
    if not congested:
        return SwapPlan(identity, before, before)

    def score(perm):
        return congestion_objective(topo.relabel_nodes(perm), volumes, congested)

    if exhaustive:
        if len(nodes) > 8:
            raise InvalidInputError("exhaustive search is limited to 8 nodes")
        best, best_val = identity, before
        for image in itertools.permutations(nodes):
            perm = dict(zip(nodes, image))
            val = score(perm)
            if _better(val, best_val):
                best, best_val = perm, val
        return SwapPlan(best, before, best_val)

    perm, cur = dict(identity), before
    while True:
        best_move, best_val = None, cur
        for a, b in itertools.combinations(nodes, 2):
            trial = dict(perm)
            # swap the roles currently sitting on physical nodes a and b
            for k, v in perm.items():
                if v == a:
                    trial[k] = b
                elif v == b:
                    trial[k] = a
            val = score(trial)
            if _better(val, best_val):
                best_move, best_val = trial, val
        if best_move is None:
            return SwapPlan(perm, before, cur)
        perm, cur = best_move, best_val

# ---------------------------------------------------------------------------
# S3: straggler consolidation
# ---------------------------------------------------------------------------

def stage_preference(pp: int) -> List[int]:
    """Pipeline stages, most interior first; ties go to the lower index."""
    return sorted(range(pp), key=lambda s: (-min(s, pp - 1 - s), s))

@dataclass(frozen=True)
class ConsolidationPlan:
    topology: ParallelTopology
    stages: Tuple[int, ...]  # stages hosting stragglers afterwards

    @property
    def placement(self):
        return self.topology.placement

def straggler_stages(topo: ParallelTopology, stragglers: Iterable[int]) -> List[int]:
    on_gpu = topo.rank_on_gpu()
    return sorted({topo.coords(on_gpu[g])[2] for g in stragglers})

def consolidate_stragglers(stragglers: Iterable[int], topo: ParallelTopology) -> ConsolidationPlan:
    """Pack straggler GPUs into the fewest, most interior pipeline stages.

    TP groups never leave their node: stragglers are first packed into as
    few TP groups per node as possible, then whole TP groups trade places
    so the straggling ones fill ``ceil(groups / D)`` stages. With one GPU
    per TP group that is ``ceil(S / G)`` for ``G`` GPUs per stage.
    """
    bad = set(stragglers)
    n_gpus = topo.world_size
    if len(bad) > n_gpus:
        raise InvalidInputError(f"{len(bad)} stragglers exceed {n_gpus} GPUs")
    if any(not 0 <= g < n_gpus for g in bad):
        raise InvalidInputError("straggler GPU id out of range")
    if not bad:
        return ConsolidationPlan(topo, ())
    T, D, P = topo.tp, topo.dp, topo.pp
    gpn = topo.gpus_per_node
    pairs = [(d, p) for p in range(P) for d in range(D)]
    host = {pr: topo.node_of(topo.rank_of(0, *pr)) for pr in pairs}

    # straggling TP-group count after packing within each node
    per_node: Dict[int, List[Tuple[int, int]]] = {}
    for pr in pairs:
        per_node.setdefault(host[pr], []).append(pr)
    n_units = sum(
        math.ceil(sum(1 for s in range(gpn) if n * gpn + s in bad) / T) for n in per_node
    )
    k = math.ceil(n_units / D)
    chosen = stage_preference(P)[:k]
    rank_pref = {s: i for i, s in enumerate(stage_preference(P))}
    target = {(d, s) for s in chosen for d in range(D)}

    def pair_key(pr):
        return (pr not in target, rank_pref[pr[1]], pr[0])

    # within each node: straggler slots first, handed to the best pairs
    unit_slots: Dict[Tuple[int, int], Tuple[int, ...]] = {}
    straggling: Dict[Tuple[int, int], bool] = {}
    for n, prs in per_node.items():
        slots = sorted(
            {topo.placement[r][1] for pr in prs for r in topo.stage_ranks(*pr)},
            key=lambda s: (n * gpn + s not in bad, s),
        )
        for i, pr in enumerate(sorted(prs, key=pair_key)):
            unit = tuple(slots[i * T : (i + 1) * T])
            unit_slots[pr] = unit
            straggling[pr] = any(n * gpn + s in bad for s in unit)

    # across nodes: trade straggling units outside the target for healthy ones inside
    outside = sorted((pr for pr in pairs if straggling[pr] and pr not in target), key=pair_key)
    inside = sorted((pr for pr in target if not straggling[pr]), key=pair_key)
    unit_of = {pr: (host[pr], unit_slots[pr]) for pr in pairs}
    for a, b in zip(outside, inside):
        unit_of[a], unit_of[b] = unit_of[b], unit_of[a]

    placement = list(topo.placement)
    for (d, p), (node, slots) in unit_of.items():
        for t, slot in enumerate(slots):
            placement[topo.rank_of(t, d, p)] = (node, slot)
    new = topo.with_placement(placement)
    return ConsolidationPlan(new, tuple(straggler_stages(new, bad)))
