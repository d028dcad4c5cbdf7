"""Fail-slow detection and multi-level mitigation for hybrid-parallel training."""

__version__ = "0.1.0"

from .errors import FailSlowError, InsufficientDataError, InvalidInputError, TraceFormatError
from .model import (
    CommCall,
    CommVolumes,
    FailSlowEvent,
    IterationSeries,
    ParallelTopology,
    TrafficModel,
    comm_volumes,
    param_count,
    read_trace,
    write_trace,
)
from .detector import (
    OnlineDetector,
    acf,
    bocd_update,
    detect_failslow,
    detect_period,
    iteration_times,
    slide_window_detect,
    verify_changepoint,
)
from .locator import classify_groups, localize, ring_schedule, tree_schedule
from .mitigator import (
    MitigationState,
    consolidate_stragglers,
    find_strategies,
    plan_topology_swap,
    planner_step,
    solve_microbatch,
    start_planner,
    strategy_overheads,
)
from .sim import ClusterScenario, InjectionEvent, emit_trace, iteration_time
from .closedloop import DetectorConfig, MitigatorConfig, run_closed_loop
