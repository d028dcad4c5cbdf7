"""Analytic simulator of synchronous hybrid-parallel training.

Per replica ``d`` and stage ``s`` the per-micro-batch stage time is

    tau[d, s] = base_compute / min(speed of the stage's GPUs)
                + activation_bytes / bandwidth(link to stage s + 1)

and a replica with ``m_d`` micro-batches finishes its pipeline in

    sum_s tau[d, s] + (m_d - 1) * max_s tau[d, s]

(fill/drain plus steady state). Gradient all-reduce then takes
``dp_bytes / min(bandwidth around the DP ring)``; the iteration ends when
the slowest replica and the slowest DP ring are done.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError
from .locator import GroupProfile
from .model import (
    CallTrace,
    CommCall,
    Link,
    ParallelTopology,
    TrafficModel,
    activation_bytes,
    comm_volumes,
    link_id,
)
from .mitigator import MicrobatchPlan, even_split

GPU_SLOWDOWN = "gpu_slowdown"
LINK_CONGESTION = "link_congestion"


@dataclass(frozen=True)
class InjectionEvent:
    kind: str
    target: Union[int, Link]
    factor: float
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if self.kind not in (GPU_SLOWDOWN, LINK_CONGESTION):
            raise InvalidInputError(f"unknown injection kind {self.kind!r}")
        if not 0.0 < self.factor < 1.0:
            raise InvalidInputError("injection factor must lie in (0, 1)")
        if not 0 <= self.start < self.end:
            raise InvalidInputError("injection interval must satisfy 0 <= start < end")
        if self.kind == LINK_CONGESTION:
            object.__setattr__(self, "target", link_id(*self.target))

    def active(self, it: int) -> bool:
        return self.start <= it < self.end


@dataclass(frozen=True)
class ClusterScenario:
    topo: ParallelTopology
    model: TrafficModel
    base_compute: float
    injections: Tuple[InjectionEvent, ...] = ()
    horizon: int = 100
    seed: int = 0
    gpu_speed: Mapping[int, float] = field(default_factory=dict)
    noise: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "injections", tuple(self.injections))
        if self.horizon < 1:
            raise InvalidInputError("horizon must be at least 1")
        if self.base_compute <= 0:
            raise InvalidInputError("base_compute must be positive")
        for g, v in self.gpu_speed.items():
            if not 0.0 < v <= 1.0:
                raise InvalidInputError(f"speed of GPU {g} must lie in (0, 1]")
        for inj in self.injections:
            if inj.end > self.horizon:
                raise InvalidInputError("injection ends after the horizon")
            if inj.kind == GPU_SLOWDOWN and not 0 <= inj.target < self.topo.world_size:
                raise InvalidInputError(f"no GPU {inj.target}")
            if inj.kind == LINK_CONGESTION and inj.target not in self.topo.links:
                raise InvalidInputError(f"no link {inj.target}")

    @property
    def global_micro_batches(self) -> int:
        return self.model.num_micro_batches * self.topo.dp

    def healthy(self) -> "ClusterScenario":
        return ClusterScenario(
            self.topo, self.model, self.base_compute, (), self.horizon,
            self.seed, self.gpu_speed, self.noise,
        )

    def noise_factors(self) -> np.ndarray:
        """Per-iteration multiplicative jitter, shared by every run of this scenario."""
        rng = np.random.default_rng(self.seed)
        return np.clip(1.0 + rng.normal(0.0, self.noise, self.horizon), 0.5, None)


@dataclass(frozen=True)
class IterationResult:
    time: float
    replica_times: Tuple[float, ...]
    stage_times: Tuple[Tuple[float, ...], ...]  # [replica][stage], per micro-batch
    dp_sync: float
    profiles: Tuple[GroupProfile, ...]
    stall: bool = False

    @property
    def micro_batch_times(self) -> Tuple[float, ...]:
        """Steady-state time per micro-batch of each replica."""
        return tuple(max(row) for row in self.stage_times)


def gpu_speeds(scn: ClusterScenario, it: int, voided: FrozenSet[int] = frozenset()) -> np.ndarray:
    speed = np.ones(scn.topo.world_size)
    for g, v in scn.gpu_speed.items():
        speed[g] = v
    for i, inj in enumerate(scn.injections):
        if inj.kind == GPU_SLOWDOWN and i not in voided and inj.active(it):
            speed[inj.target] *= inj.factor
    return speed


def link_bandwidths(scn: ClusterScenario, it: int, voided: FrozenSet[int] = frozenset()) -> Dict[Link, float]:
    bw = dict(scn.topo.links)
    for i, inj in enumerate(scn.injections):
        if inj.kind == LINK_CONGESTION and i not in voided and inj.active(it):
            bw[inj.target] *= inj.factor
    return bw


def _bw(topo: ParallelTopology, bw: Mapping[Link, float], r1: int, r2: int) -> float:
    a, b = topo.node_of(r1), topo.node_of(r2)
    return topo.intra_node_bandwidth if a == b else bw[link_id(a, b)]


def iteration_time(
    scn: ClusterScenario,
    it: int,
    plan: Optional[MicrobatchPlan] = None,
    topo: Optional[ParallelTopology] = None,
    voided: FrozenSet[int] = frozenset(),
) -> IterationResult:
    """Noise-free duration of iteration ``it`` plus per-group profiles."""
    topo = scn.topo if topo is None else topo
    D, P = topo.dp, topo.pp
    plan = even_split(scn.global_micro_batches, D) if plan is None else plan
    if len(plan.m) != D:
        raise InvalidInputError("micro-batch plan does not match the DP size")
    speed = gpu_speeds(scn, it, voided)
    bw = link_bandwidths(scn, it, voided)
    stall = any(v <= 0 for v in bw.values())
    act = activation_bytes(scn.model)
    vol = comm_volumes(scn.model, topo)

    stage_times = []
    pp_transfer = []
    for d in range(D):
        row, xfer = [], 0.0
        for s in range(P):
            ranks = topo.stage_ranks(d, s)
            tau = scn.base_compute / float(min(speed[topo.gpu_of(r)] for r in ranks))
            if s < P - 1:
                c = act / max(_bw(topo, bw, ranks[0], topo.rank_of(0, d, s + 1)), 1e-9)
                tau += c
                xfer += c * plan.m[d]
            row.append(tau)
        stage_times.append(tuple(row))
        pp_transfer.append(xfer)
    replica = tuple(
        sum(row) + (m - 1) * max(row) for row, m in zip(stage_times, plan.m)
    )

    dp_times = []
    if D > 1:
        for group in topo.dp_groups():
            ring = list(zip(group, group[1:] + group[:1])) if D > 2 else [tuple(group)]
            slowest = min(_bw(topo, bw, a, b) for a, b in ring)
            dp_times.append(vol.dp_bytes / max(slowest, 1e-9))
    dp_sync = max(dp_times, default=0.0)
    slowest_replica = max(replica)

    profiles: List[GroupProfile] = []
    T = topo.tp
    for gi, group in enumerate(topo.dp_groups()):
        if D > 1:
            waits = [slowest_replica - replica[topo.coords(r)[1]] for r in group]
            profiles.append(GroupProfile(("dp", gi), dp_times[gi], float(np.mean(waits))))
    for gi in range(T * D):
        d = gi // T
        profiles.append(GroupProfile(("pp", gi), pp_transfer[d], slowest_replica - replica[d]))
    return IterationResult(
        slowest_replica + dp_sync,
        replica,
        tuple(stage_times),
        dp_sync,
        tuple(profiles),
        stall,
    )


# ---------------------------------------------------------------------------
# Benchmarks used by validation
# ---------------------------------------------------------------------------


def gemm_benchmark(
    scn: ClusterScenario, it: int, gpus, work: float = 1.0, voided: FrozenSet[int] = frozenset()
) -> Dict[int, float]:
    """Seconds for a fixed GEMM on each GPU."""
    speed = gpu_speeds(scn, it, voided)
    return {g: work / float(speed[g]) for g in sorted(gpus)}


def p2p_benchmark(
    scn: ClusterScenario,
    it: int,
    pairs,
    topo: Optional[ParallelTopology] = None,
    nbytes: float = 64e6,
    voided: FrozenSet[int] = frozenset(),
) -> Dict[Link, float]:
    """Seconds to send ``nbytes`` between each rank pair, keyed by the
    inter-node link it crosses; intra-node pairs are skipped."""
    topo = scn.topo if topo is None else topo
    bw = link_bandwidths(scn, it, voided)
    out: Dict[Link, float] = {}
    for a, b in pairs:
        lk = topo.rank_link(a, b)
        if lk is not None:
            out[lk] = max(out.get(lk, 0.0), nbytes / bw[lk])
    return out


# ---------------------------------------------------------------------------
# Trace emission
# ---------------------------------------------------------------------------


def _rank_calls(topo: ParallelTopology, model: TrafficModel, vol, rank: int, m: int):
    """(kind, group, nbytes) sequence one rank issues per iteration."""
    t, d, p = topo.coords(rank)
    ids = topo.group_ids()
    tp_group = ids["tp"] + d + topo.dp * p
    dp_group = ids["dp"] + t + topo.tp * p
    pp_group = ids["pp"] + t + topo.tp * d
    act = int(activation_bytes(model))
    tp_bytes = int(vol.tp_bytes / max(m, 1) / 2) if topo.tp > 1 else 0
    calls = []
    for phase in ("fwd", "bwd"):
        first, last = (0, topo.pp - 1) if phase == "fwd" else (topo.pp - 1, 0)
        for _ in range(m):
            if p != first:
                calls.append(("recv", pp_group, act))
            if topo.tp > 1:
                calls.append(("allreduce", tp_group, tp_bytes))
            if p != last:
                calls.append(("send", pp_group, act))
    if topo.dp > 1:
        calls.append(("allreduce", dp_group, int(vol.dp_bytes)))
    elif not calls:
        calls.append(("allreduce", tp_group, 0))
    return calls


def emit_trace(
    scn: ClusterScenario,
    iters: Optional[int] = None,
    times: Optional[Sequence[float]] = None,
    plans: Optional[Sequence[MicrobatchPlan]] = None,
    topo: Optional[ParallelTopology] = None,
) -> CallTrace:
    """Timestamped call sequence of every rank.

    Iteration durations come from ``times`` when given (e.g. a closed-loop
    timeline), otherwise from the noisy simulator. Calls are spread evenly
    over their iteration, the first at the iteration start.
    """
    topo = scn.topo if topo is None else topo
    if times is None:
        n = scn.horizon if iters is None else iters
        noise = scn.noise_factors()
        times = [iteration_time(scn, i, topo=topo).time * noise[i % scn.horizon] for i in range(n)]
    n = len(times)
    starts = np.concatenate(([0.0], np.cumsum(times)))
    vol = comm_volumes(scn.model, topo)
    default = even_split(scn.global_micro_batches, topo.dp)
    trace: CallTrace = {}
    for rank in range(topo.world_size):
        d = topo.coords(rank)[1]
        calls: List[CommCall] = []
        for i in range(n):
            plan = plans[i] if plans is not None else default
            seq = _rank_calls(topo, scn.model, vol, rank, plan.m[d])
            span = times[i]
            for j, (kind, group, nbytes) in enumerate(seq):
                ts = starts[i] + span * j / len(seq)
                calls.append(CommCall(rank, float(ts), kind, group, nbytes))
        trace[rank] = calls
    return trace


def calls_per_iteration(scn: ClusterScenario, rank: int = 0, m: Optional[int] = None) -> int:
    topo = scn.topo
    m = scn.model.num_micro_batches if m is None else m
    return len(_rank_calls(topo, scn.model, comm_volumes(scn.model, topo), rank, m))
