"""Narrowing a slowdown to components: group profiling, P2P validation
schedules for ring and tree communicators, and benchmark-based localization."""

from __future__ import annotations

from dataclasses import dataclass
from statistics import median
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

from .errors import InvalidInputError

SUSPICION_FACTOR = 1.1

Pair = Tuple[int, int]


@dataclass(frozen=True)
class GroupProfile:
    group: Hashable
    transfer_time: float
    idle_time: float = 0.0

    def __post_init__(self):
        if self.transfer_time < 0 or self.idle_time < 0:
            raise InvalidInputError("profile times must be nonnegative")


def classify_groups(
    profiles: Sequence[GroupProfile], factor: float = SUSPICION_FACTOR
) -> List[Hashable]:
    """Groups whose transfer time exceeds ``factor`` x the median."""
    if not profiles:
        raise InvalidInputError("need at least one group profile")
    cutoff = factor * median(p.transfer_time for p in profiles)
    return [p.group for p in profiles if p.transfer_time > cutoff]


def busy_groups(
    profiles: Sequence[GroupProfile], factor: float = SUSPICION_FACTOR
) -> List[Hashable]:
    """Groups that idle markedly less than their peers.

    Healthy groups wait on a slow peer at every synchronization point; the
    group that never waits is the one everybody is waiting for.
    """
    if not profiles:
        raise InvalidInputError("need at least one group profile")
    ref = median(p.idle_time for p in profiles)
    if ref <= 0:
        return []
    return [p.group for p in profiles if p.idle_time * factor < ref]


# ---------------------------------------------------------------------------
# Validation schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationSchedule:
    passes: Tuple[Tuple[Pair, ...], ...]

    def __len__(self) -> int:
        return len(self.passes)

    @property
    def pairs(self) -> List[Pair]:
        return [pr for ps in self.passes for pr in ps]

    def relabel(self, ranks: Sequence[int]) -> "ValidationSchedule":
        """Map ring positions ``0..n-1`` onto actual communicator ranks."""
        return ValidationSchedule(
            tuple(tuple((ranks[a], ranks[b]) for a, b in ps) for ps in self.passes)
        )

    def to_text(self) -> str:
        lines = []
        for i, ps in enumerate(self.passes):
            lines.append(f"pass {i} ({len(ps)} pairs)")
            for a, b in ps:
                lines.append(f"  {a} -> {b}")
        return "\n".join(lines) + "\n"


def ring_schedule(n: int) -> ValidationSchedule:
    """Cover every link of an ``n``-rank ring with vertex-disjoint P2P passes.

    Even rings take two passes (even->odd, then odd->next even). Odd rings
    use the same two passes over the open chain plus one pass for the wrap
    link ``n-1 -> 0``.
    """
    if n < 2:
        raise InvalidInputError(f"ring needs at least 2 ranks, got {n}")
    if n == 2:
        return ValidationSchedule((((0, 1),),))
    first = tuple((i, i + 1) for i in range(0, n - 1, 2))
    if n % 2 == 0:
        second = tuple((i, (i + 1) % n) for i in range(1, n, 2))
        return ValidationSchedule((first, second))
    second = tuple((i, i + 1) for i in range(1, n - 1, 2))
    return ValidationSchedule((first, second, ((n - 1, 0),)))


def _depths(parent: Mapping[int, Optional[int]]) -> Dict[int, int]:
    roots = [r for r, p in parent.items() if p is None]
    if len(roots) != 1:
        raise InvalidInputError(f"tree needs exactly one root, found {len(roots)}")
    for r, p in parent.items():
        if p is not None and p not in parent:
            raise InvalidInputError(f"rank {r} has unknown parent {p}")
    depth: Dict[int, int] = {}
    for r in parent:
        path: List[int] = []
        node = r
        while node not in depth:
            if parent[node] is None:
                depth[node] = 0
                break
            path.append(node)
            if len(path) > len(parent):
                raise InvalidInputError(f"cycle through rank {node}")
            node = parent[node]
        for n in reversed(path):
            depth[n] = depth[parent[n]] + 1
    return depth


def tree_schedule(parent: Mapping[int, Optional[int]]) -> ValidationSchedule:
    """Four passes covering every edge of a binary tree.

    ``parent`` maps each rank to its parent (None for the root). Children are
    ordered by rank id: the first is the left child. Passes 1-2 run
    left/right child -> parent for parents on even levels; passes 3-4 run
    parent -> left/right child for parents on odd levels.
    """
    depth = _depths(parent)
    children: Dict[int, List[int]] = {r: [] for r in parent}
    for r, p in parent.items():
        if p is not None:
            children[p].append(r)
    passes: List[List[Pair]] = [[], [], [], []]
    for p in sorted(children):
        kids = sorted(children[p])
        if len(kids) > 2:
            raise InvalidInputError(f"rank {p} has {len(kids)} children; tree must be binary")
        odd = depth[p] % 2
        for side, c in enumerate(kids):
            idx = 2 * odd + side
            passes[idx].append((p, c) if odd else (c, p))
    return ValidationSchedule(tuple(tuple(ps) for ps in passes))


def parse_tree(text: str) -> Dict[int, Optional[int]]:
    """Parse ``child parent`` lines (parent ``-`` for the root); ``#`` comments."""
    parent: Dict[int, Optional[int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise InvalidInputError(f"line {lineno}: expected 'child parent'")
        try:
            child = int(parts[0])
            par = None if parts[1] in ("-", "root", "none") else int(parts[1])
        except ValueError:
            raise InvalidInputError(f"line {lineno}: ranks must be integers") from None
        if child in parent:
            raise InvalidInputError(f"line {lineno}: rank {child} listed twice")
        parent[child] = par
    if not parent:
        raise InvalidInputError("empty tree")
    _depths(parent)
    return parent


# ---------------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Located:
    gpus: Tuple[int, ...] = ()
    links: Tuple[Tuple[int, int], ...] = ()

    @property
    def kind(self) -> str:
        if self.gpus:
            return "computation"
        if self.links:
            return "communication"
        return "unknown"

    def __bool__(self) -> bool:
        return bool(self.gpus or self.links)


def _outliers(results: Mapping, baseline: Optional[float], factor: float) -> list:
    if not results:
        return []
    if len(results) == 1:
        if baseline is None:
            return []
        return [k for k, v in results.items() if v > factor * baseline]
    cutoff = factor * median(results.values())
    return sorted(k for k, v in results.items() if v > cutoff)


def localize(
    compute_results: Mapping[int, float],
    link_results: Mapping[Tuple[int, int], float],
    gpu_baseline: Optional[float] = None,
    link_baseline: Optional[float] = None,
    factor: float = SUSPICION_FACTOR,
) -> Located:
    """Flag GPUs and links whose benchmark time exceeds ``factor`` x the
    median of their class. A lone component is judged against its healthy
    baseline instead."""
    return Located(
        tuple(_outliers(compute_results, gpu_baseline, factor)),
        tuple(_outliers(link_results, link_baseline, factor)),
    )
