"""
Finding fail-slow iterations in a raw call trace
================================================

A rank only ever shows us a stream of collective calls. This walk-through
recovers the iteration boundary from that stream, turns it into a series of
iteration durations and lets the change-point detector mark the slow stretch.
"""
# %%
# A trace with a known slowdown
# -----------------------------
# Two replicas, two stages. Iterations 60-110 run 35% slower.
import numpy as np

from failslow.detector import (
    OnlineDetector,
    detect_failslow,
    detect_period,
    iteration_times,
    signature_codes,
    slide_window_detect,
)
from failslow.model import ParallelTopology, TrafficModel
from failslow.sim import ClusterScenario, calls_per_iteration, emit_trace

topo = ParallelTopology.build(1, 2, 2, gpus_per_node=1)
model = TrafficModel(layers=8, hidden=1024, heads=8, head_dim=128, vocab=0, context=1024, num_micro_batches=4)
scn = ClusterScenario(topo, model, 0.05, (), horizon=200)

rng = np.random.default_rng(7)
durations = 1.0 + rng.normal(0, 0.005, 200)
durations[60:110] *= 1.35
trace = emit_trace(scn, times=durations)
calls = trace[0]
print(f"rank 0 issued {len(calls)} calls")

# %%
# Period from call signatures
# ---------------------------
codes = signature_codes(calls)
period = detect_period(codes)
print("detected period:", period, "| true calls per iteration:", calls_per_iteration(scn, 0))

# %%
# Iteration durations and change-points
# -------------------------------------
series = iteration_times(calls, period)
print("first durations:", np.round(series.values[:5], 3))
for ev in detect_failslow(series):
    print(f"event: iterations {ev.onset_iter}..{ev.recovery_iter}, severity x{ev.severity:.2f}")

# %%
# Online view
# -----------
# The same detector fed one sample at a time. Each verified change-point
# is reported a few samples after it happens.
det = OnlineDetector()
for i, v in enumerate(series.values):
    for cp in det.update(v):
        print(f"at sample {i}: {cp.direction} from iteration {cp.index} ({cp.mean_before:.3f} -> {cp.mean_after:.3f})")

# %%
# A slow drift that a short window misses
# ---------------------------------------
ramp = 1.0 + rng.normal(0, 0.004, 200)
ramp[50:] *= 1.0 + np.minimum(0.008 * np.arange(1, 151), 0.5)
print("bocd + verification:", [(e.onset_iter, round(e.severity, 2)) for e in detect_failslow(ramp)])
print("10-sample median window:", [(e.onset_iter, round(e.severity, 2)) for e in slide_window_detect(ramp)])
