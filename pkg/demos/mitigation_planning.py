"""
Choosing how hard to react
==========================

Each mitigation has a one-off cost. The planner tolerates a slowdown until
the time it has already lost pays for the next, more expensive step.
"""
# %%
# Escalation ladder
# -----------------
from failslow.mitigator import (
    Strategy,
    consolidate_stragglers,
    even_split,
    plan_topology_swap,
    planner_step,
    solve_microbatch,
    start_planner,
    straggler_stages,
    strategy_overheads,
)
from failslow.model import ParallelTopology, TrafficModel, comm_volumes

ladder = [Strategy("S1", 0.0), Strategy("S2", 5.0), Strategy("S3", 60.0), Strategy("S4", 600.0)]
state, first = start_planner(None, ladder, t_healthy=1.0)
print("start with", first.id)
for i in range(1, 701):
    state, act = planner_step(state, 2.0)  # 1 s lost per iteration
    if act:
        print(f"iteration {i}: lost {state.accumulated_impact:.0f}s, apply {act.id}")

model = TrafficModel(layers=96, hidden=9216, heads=72, head_dim=128, vocab=50257, context=2048)
print({k: round(v, 1) for k, v in strategy_overheads(model).items()})

# %%
# Fewer micro-batches for a slow replica
# --------------------------------------
times = [1.0, 1.0, 1.0, 2.0]
for plan in (even_split(16, 4), solve_microbatch(16, times)):
    print(plan.m, "-> slowest replica", plan.makespan(times))

# %%
# Moving data-parallel traffic off a congested link
# -------------------------------------------------
small = TrafficModel(layers=8, hidden=1024, heads=8, head_dim=128, vocab=0, context=1024, num_micro_batches=4)
topo = ParallelTopology.build(1, 2, 2, gpus_per_node=1)
swap = plan_topology_swap(topo, {(2, 3): 1e9}, comm_volumes(small, topo))
print("permutation:", swap.permutation, "objective", swap.before[0], "->", swap.after[0])

# %%
# Packing stragglers into one stage
# ---------------------------------
topo = ParallelTopology.build(1, 4, 4)
slow = [0, 7, 9, 14]
plan = consolidate_stragglers(slow, topo)
print("straggler stages before:", straggler_stages(topo, slow), "after:", list(plan.stages))
