"""Shared domain types: cluster topology, communication traces, detected
events and the transformer traffic model.

Ranks are laid out tensor-parallel fastest, then data-parallel, then
pipeline-parallel::

    rank = tp + T * (dp + D * pp)

so with ``gpus_per_node`` a multiple of ``T`` every TP group lands on one node.
GPU ids are flat: ``gpu = node * gpus_per_node + slot``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, TraceFormatError
from .reports import atomic_write_text

Link = Tuple[int, int]

KINDS = ("computation", "communication", "unknown")

COLLECTIVES = (
    "allreduce",
    "allgather",
    "reducescatter",
    "broadcast",
    "send",
    "recv",
)


def link_id(a: int, b: int) -> Link:
    """Canonical (undirected) id of the link between nodes ``a`` and ``b``."""
    return (a, b) if a <= b else (b, a)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParallelTopology:
    tp: int
    dp: int
    pp: int
    gpus_per_node: int
    placement: Tuple[Tuple[int, int], ...]
    links: Mapping[Link, float]
    intra_node_bandwidth: float

    @classmethod
    def build(
        cls,
        tp: int,
        dp: int,
        pp: int,
        gpus_per_node: Optional[int] = None,
        link_bandwidth: float = 25e9,
        intra_node_bandwidth: float = 300e9,
    ) -> "ParallelTopology":
        """Sequential placement over a fully connected set of nodes."""
        gpn = tp if gpus_per_node is None else gpus_per_node
        world = tp * dp * pp
        if min(tp, dp, pp, gpn) < 1:
            raise InvalidInputError("parallel sizes must be positive")
        if gpn % tp:
            raise InvalidInputError("gpus_per_node must be a multiple of tp")
        if world % gpn:
            raise InvalidInputError("world size must fill whole nodes")
        n_nodes = world // gpn
        placement = tuple((r // gpn, r % gpn) for r in range(world))
        links = {
            (a, b): float(link_bandwidth)
            for a in range(n_nodes)
            for b in range(a + 1, n_nodes)
        }
        topo = cls(tp, dp, pp, gpn, placement, links, float(intra_node_bandwidth))
        topo.validate()
        return topo

    # -- sizes ---------------------------------------------------------------

    @property
    def world_size(self) -> int:
        return self.tp * self.dp * self.pp

    @property
    def num_nodes(self) -> int:
        return self.world_size // self.gpus_per_node

    @property
    def nodes(self) -> List[int]:
        return list(range(self.num_nodes))

    @property
    def gpus_per_stage(self) -> int:
        return self.tp * self.dp

    # -- rank arithmetic -----------------------------------------------------

    def coords(self, rank: int) -> Tuple[int, int, int]:
        """(tp index, dp index, pp index) of ``rank``."""
        t = rank % self.tp
        d = (rank // self.tp) % self.dp
        p = rank // (self.tp * self.dp)
        return t, d, p

    def rank_of(self, t: int, d: int, p: int) -> int:
        return t + self.tp * (d + self.dp * p)

    def node_of(self, rank: int) -> int:
        return self.placement[rank][0]

    def gpu_of(self, rank: int) -> int:
        node, slot = self.placement[rank]
        return node * self.gpus_per_node + slot

    def rank_on_gpu(self) -> Dict[int, int]:
        return {self.gpu_of(r): r for r in range(self.world_size)}

    def stage_ranks(self, d: int, p: int) -> List[int]:
        """The TP group holding pipeline stage ``p`` of replica ``d``."""
        return [self.rank_of(t, d, p) for t in range(self.tp)]

    def dp_groups(self) -> List[List[int]]:
        """DP groups indexed ``t + T * p``; members in replica order."""
        return [
            [self.rank_of(t, d, p) for d in range(self.dp)]
            for p in range(self.pp)
            for t in range(self.tp)
        ]

    def pp_groups(self) -> List[List[int]]:
        """Pipeline chains indexed ``t + T * d``; members in stage order."""
        return [
            [self.rank_of(t, d, p) for p in range(self.pp)]
            for d in range(self.dp)
            for t in range(self.tp)
        ]

    def group_ids(self) -> Dict[str, int]:
        """Offsets of the integer communication-group id spaces."""
        n_tp = self.dp * self.pp
        n_dp = self.tp * self.pp
        return {"tp": 0, "dp": n_tp, "pp": n_tp + n_dp}

    # -- links ---------------------------------------------------------------

    def bandwidth(self, a: int, b: int) -> float:
        if a == b:
            return self.intra_node_bandwidth
        return self.links[link_id(a, b)]

    def rank_link(self, r1: int, r2: int) -> Optional[Link]:
        """Physical inter-node link used between two ranks (None if intra-node)."""
        a, b = self.node_of(r1), self.node_of(r2)
        return None if a == b else link_id(a, b)

    # -- placement edits -----------------------------------------------------

    def with_placement(self, placement: Sequence[Tuple[int, int]]) -> "ParallelTopology":
        topo = replace(self, placement=tuple(tuple(p) for p in placement))
        topo.validate()
        return topo

    def relabel_nodes(self, perm: Mapping[int, int]) -> "ParallelTopology":
        """Move every rank hosted on node ``n`` to node ``perm[n]``."""
        return self.with_placement(
            [(perm.get(n, n), s) for n, s in self.placement]
        )

    def validate(self) -> None:
        if len(self.placement) != self.world_size:
            raise InvalidInputError(
                f"placement has {len(self.placement)} ranks, expected {self.world_size}"
            )
        if len(set(self.placement)) != len(self.placement):
            raise InvalidInputError("placement is not a bijection")
        for node, slot in self.placement:
            if not (0 <= node < self.num_nodes and 0 <= slot < self.gpus_per_node):
                raise InvalidInputError(f"placement slot {(node, slot)} out of range")
        for d in range(self.dp):
            for p in range(self.pp):
                if len({self.node_of(r) for r in self.stage_ranks(d, p)}) != 1:
                    raise InvalidInputError(f"TP group (dp={d}, pp={p}) spans nodes")


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


def encode_signature(kind: str, group: int, nbytes: int) -> int:
    """Pack (collective kind, group id, log2 size bucket) into one integer."""
    try:
        k = COLLECTIVES.index(kind)
    except ValueError:
        raise InvalidInputError(f"unknown collective kind {kind!r}") from None
    bucket = int(nbytes).bit_length()
    return (k << 48) | (int(group) << 8) | bucket


@dataclass(frozen=True)
class CommCall:
    rank: int
    timestamp: float
    kind: str
    group: int
    nbytes: int

    @property
    def signature(self) -> int:
        return encode_signature(self.kind, self.group, self.nbytes)


CallTrace = Dict[int, List[CommCall]]

TRACE_HEADER = ["rank", "timestamp_s", "kind", "group", "bytes"]


def write_trace(path, trace: CallTrace) -> None:
    path = Path(path)
    rows = []
    for rank in sorted(trace):
        for c in trace[rank]:
            rows.append((c.rank, f"{c.timestamp:.6f}", c.kind, c.group, c.nbytes))
    lines = [",".join(TRACE_HEADER)]
    lines += [",".join(str(x) for x in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trace(path) -> CallTrace:
    """Parse a trace CSV; calls are grouped per rank in file order."""
    trace: CallTrace = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return trace
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceFormatError(1, f"expected header {','.join(TRACE_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != 5:
                raise TraceFormatError(line, f"expected 5 fields, got {len(row)}")
            try:
                call = CommCall(
                    rank=int(row[0]),
                    timestamp=float(row[1]),
                    kind=row[2].strip(),
                    group=int(row[3]),
                    nbytes=int(row[4]),
                )
            except ValueError as exc:
                raise TraceFormatError(line, str(exc)) from None
            if call.kind not in COLLECTIVES:
                raise TraceFormatError(line, f"unknown kind {call.kind!r}")
            calls = trace.setdefault(call.rank, [])
            if calls and call.timestamp < calls[-1].timestamp:
                raise TraceFormatError(line, "timestamps must be nondecreasing per rank")
            calls.append(call)
    return trace


# ---------------------------------------------------------------------------
# Detection results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationSeries:
    rank: int
    durations: Tuple[float, ...]
    start_indices: Tuple[int, ...]
    # positions in ``durations`` where the call pattern was resynchronized
    breaks: Tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.durations) != len(self.start_indices):
            raise InvalidInputError("durations and start_indices differ in length")
        if any(d <= 0 for d in self.durations):
            raise InvalidInputError("iteration durations must be positive")

    @classmethod
    def from_values(cls, values: Iterable[float], rank: int = 0) -> "IterationSeries":
        vals = tuple(float(v) for v in values)
        return cls(rank, vals, tuple(range(len(vals))))

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.durations, dtype=float)

    def __len__(self) -> int:
        return len(self.durations)


@dataclass(frozen=True)
class FailSlowEvent:
    onset_iter: int
    recovery_iter: Optional[int] = None
    kind: str = "unknown"
    located: Optional[Tuple] = None
    severity: float = 1.0
    t_healthy: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown event kind {self.kind!r}")
        if self.recovery_iter is not None and self.recovery_iter <= self.onset_iter:
            raise InvalidInputError("recovery must come after onset")
        if self.severity < 1.0:
            raise InvalidInputError("severity must be >= 1")

    @property
    def is_open(self) -> bool:
        return self.recovery_iter is None


# ---------------------------------------------------------------------------
# Traffic model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrafficModel:
    layers: int
    hidden: int
    heads: int
    head_dim: int
    vocab: int
    context: int
    micro_batch: int = 1
    num_micro_batches: int = 1
    grad_bytes_factor: float = 2.0
    element_bytes: int = 2

    def __post_init__(self):
        for name in ("layers", "hidden", "micro_batch", "num_micro_batches", "element_bytes"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("heads", "head_dim", "vocab", "context"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if self.grad_bytes_factor <= 0:
            raise InvalidInputError("grad_bytes_factor must be positive")


def param_count(model: TrafficModel) -> int:
    """Exact transformer parameter count (embeddings, attention, FFN, norms)."""
    h, L = model.hidden, model.layers
    return (
        model.vocab * h
        + model.context * h
        + 4 * h * model.heads * model.head_dim * L
        + L * (8 * h * h + 5 * h)
    )


def param_count_approx(model: TrafficModel) -> int:
    """The usual ``12 L h^2`` estimate."""
    return 12 * model.layers * model.hidden**2


@dataclass(frozen=True)
class CommVolumes:
    tp_bytes: float
    dp_bytes: float
    pp_bytes: float


def comm_volumes(model: TrafficModel, topo: ParallelTopology) -> CommVolumes:
    """Per-iteration communication volume of each parallel dimension, in bytes."""
    T, P = topo.tp, topo.pp
    b, m, n, h, L = (
        model.micro_batch,
        model.num_micro_batches,
        model.context,
        model.hidden,
        model.layers,
    )
    e = model.element_bytes
    tp = 8 * b * m * n * h * L * (T - 1) / (P * T) * e
    dp = model.grad_bytes_factor * param_count(model) / (T * P) * e
    pp = m * b * n * h * e
    return CommVolumes(float(tp), float(dp), float(pp))


def activation_bytes(model: TrafficModel) -> float:
    """Bytes sent between adjacent stages for one micro-batch."""
    return float(model.micro_batch * model.context * model.hidden * model.element_bytes)

