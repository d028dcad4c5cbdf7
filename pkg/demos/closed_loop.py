"""
Detection and mitigation against a simulated cluster
====================================================

A 16-GPU job (4 replicas x 4 stages) runs 800 iterations. One GPU drops to
half speed for 600 of them. The same run is repeated with mitigation off
and on.
"""
# %%
import time

from failslow.closedloop import MitigatorConfig, run_closed_loop, slowdown_reduction
from failslow.config import load_config

cfg = load_config(__file__.rsplit("/", 1)[0] + "/configs/straggler.json")
scn = cfg.build_scenario()

t0 = time.perf_counter()
off = run_closed_loop(scn, cfg.detector_config(), cfg.mitigator_config(enabled=False))
on = run_closed_loop(scn, cfg.detector_config(), cfg.mitigator_config(enabled=True))
print(f"both arms in {time.perf_counter() - t0:.2f}s")

# %%
# What happened
# -------------
for inc in on.incidents:
    print("incident", inc.to_dict())
for a in on.actions:
    print(f"iteration {a.iteration}: {a.strategy} after {a.accumulated_impact:.1f}s lost", a.params if a.strategy != "S3" else "")

# %%
# Cost
# ----
print("slowdown without mitigation:", off.summary()["slowdown_pct"], "%")
print("slowdown with mitigation:   ", on.summary()["slowdown_pct"], "%")
print("reduction:", slowdown_reduction(off.summary(), on.summary()), "%")

# %%
# Timeline sample
# ---------------
for r in on.records[95:130:5]:
    print(r.iter, round(r.time_s, 3), r.active_strategy)
