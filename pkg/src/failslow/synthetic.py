"""Labeled synthetic iteration-time series for detector evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np


@dataclass(frozen=True)
class LabeledSeries:
    kind: str  # clean | jitter | step | ramp
    values: np.ndarray
    onset: Optional[int] = None
    recovery: Optional[int] = None
    magnitude: float = 0.0

    @property
    def positive(self) -> bool:
        return self.onset is not None


def _noise(rng, n, base=1.0):
    sigma = rng.uniform(0.002, 0.008)
    return base * (1.0 + rng.normal(0.0, sigma, n))


def clean(rng, n=200) -> LabeledSeries:
    return LabeledSeries("clean", _noise(rng, n, rng.uniform(0.5, 5.0)))


def jitter(rng, n=200) -> LabeledSeries:
    """Isolated spikes and short bursts, all below the 10% band."""
    x = _noise(rng, n, rng.uniform(0.5, 5.0))
    for _ in range(rng.integers(3, 12)):
        i = int(rng.integers(5, n - 3))
        width = int(rng.integers(1, 4))
        x[i : i + width] *= 1.0 + rng.uniform(0.02, 0.085)
    return LabeledSeries("jitter", x)


def step(rng, n=200, magnitude=None, recover=None) -> LabeledSeries:
    base = rng.uniform(0.5, 5.0)
    x = _noise(rng, n, base)
    mag = rng.uniform(0.10, 1.0) if magnitude is None else magnitude
    onset = int(rng.integers(40, 100))
    rec = None
    if recover is None:
        recover = rng.random() < 0.5
    if recover:
        rec = onset + int(rng.integers(25, 80))
    x[onset:rec] *= 1.0 + mag
    return LabeledSeries("step", x, onset, rec, mag)


def ramp(rng, n=200) -> LabeledSeries:
    """Linear drift of 0.5-1.5% per iteration up to a 20-60% plateau."""
    x = _noise(rng, n, rng.uniform(0.5, 5.0))
    slope = rng.uniform(0.005, 0.015)
    amp = rng.uniform(0.2, 0.6)
    onset = int(rng.integers(40, 80))
    prof = np.minimum(slope * np.arange(1, n - onset + 1), amp)
    x[onset:] *= 1.0 + prof
    return LabeledSeries("ramp", x, onset, None, amp)


def suite(seed: int = 0, n_series: int = 500, length: int = 200) -> List[LabeledSeries]:
    """Mixed suite: 40% clean, 20% jitter, 25% steps, 15% ramps."""
    rng = np.random.default_rng(seed)
    counts = {
        "clean": int(0.40 * n_series),
        "jitter": int(0.20 * n_series),
        "step": int(0.25 * n_series),
    }
    counts["ramp"] = n_series - sum(counts.values())
    makers = {"clean": clean, "jitter": jitter, "step": step, "ramp": ramp}
    out = []
    for kind, k in counts.items():
        out += [makers[kind](rng, length) for _ in range(k)]
    return out
