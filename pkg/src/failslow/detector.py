"""Slow-iteration tracking from communication-call timestamps.

Pipeline: signature codes -> recurring period (autocorrelation) ->
per-iteration durations -> Bayesian online change-point detection ->
verification of each change-point against a 10% jitter band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from .errors import InsufficientDataError, InvalidInputError
from .model import CommCall, FailSlowEvent, IterationSeries

PERIOD_THRESHOLD = 0.95
CHANGE_THRESHOLD = 0.9
JITTER_THRESHOLD = 0.10
HAZARD_LAMBDA = 1000.0
VERIFY_WINDOW = 20


# ---------------------------------------------------------------------------
# Period detection
# ---------------------------------------------------------------------------


def signature_codes(calls: Sequence[CommCall]) -> np.ndarray:
    """Dense integer codes (1, 2, ...) in order of first appearance.

    Raw signatures are wide bit-packed integers; the autocorrelation only
    needs a stable code per distinct call.
    """
    seen: Dict[int, int] = {}
    out = np.empty(len(calls), dtype=np.int64)
    for i, c in enumerate(calls):
        out[i] = seen.setdefault(c.signature, len(seen) + 1)
    return out


def acf(codes: Sequence[float], k: int, L: Optional[int] = None, start: int = 0) -> float:
    """Lag-``k`` autocorrelation of the ``L`` codes starting at ``start``.

    The numerator sums ``L - k`` products while the denominator sums all
    ``L`` squared deviations, so a perfectly periodic signal scores
    ``(L - k) / L`` rather than 1. A constant window has no variance and
    scores 0.
    """
    x = np.asarray(codes, dtype=float)
    if L is None:
        L = len(x) - start
    if not (1 <= k < L <= len(x) - start):
        raise InvalidInputError(f"need 1 <= k < L <= len(codes); got k={k}, L={L}")
    w = x[start : start + L]
    dev = w - w.mean()
    denom = float(np.dot(dev, dev))
    if denom == 0.0:
        return 0.0
    return float(np.dot(dev[: L - k], dev[k:])) / denom


def acf_profile(codes: Sequence[float], k_max: int) -> Tuple[np.ndarray, bool]:
    """Lag-``1..k_max`` ACF pooled over one indicator series per code, plus
    a zero-variance flag.

    Each code value is treated as a label, not a number: the statistic is
    the same biased ACF summed over the indicator series ``[x_t == c]``, so
    a repetition counts only when codes match exactly and relabeling the
    codes changes nothing. Per lag this is an O(L) sum of
    ``[x_t == x_{t+k}] - pi(x_t) - pi(x_{t+k}) + sum(pi^2)`` where ``pi`` is
    the code frequency.
    """
    _, idx = np.unique(np.asarray(codes), return_inverse=True)
    L = len(idx)
    pi = np.bincount(idx) / L
    s2 = float(np.dot(pi, pi))
    denom = L * (1.0 - s2)
    if denom <= 1e-12 * L:
        return np.zeros(k_max), True
    w = pi[idx]
    vals = np.empty(k_max)
    for k in range(1, k_max + 1):
        same = np.count_nonzero(idx[: L - k] == idx[k:])
        vals[k - 1] = same - w[: L - k].sum() - w[k:].sum() + (L - k) * s2
    return vals / denom, False


def detect_period(
    codes: Sequence[float],
    k_max: Optional[int] = None,
    threshold: float = PERIOD_THRESHOLD,
) -> Optional[int]:
    """Smallest lag whose ACF reaches ``threshold``, or None.

    A constant sequence repeats with every lag; it is reported as period 1.
    """
    n = len(codes)
    if k_max is None:
        k_max = min(256, n // 2)
    if k_max < 1 or n < 2 * k_max:
        raise InsufficientDataError(
            f"period search up to lag {k_max} needs at least {2 * max(k_max, 1)} calls, got {n}"
        )
    values, flat = acf_profile(codes, k_max)
    if flat:
        return 1
    hits = np.flatnonzero(values >= threshold)
    return int(hits[0]) + 1 if hits.size else None


# ---------------------------------------------------------------------------
# Iteration times
# ---------------------------------------------------------------------------


def _find_block(sigs: List[int], pattern: List[int], start: int) -> Optional[int]:
    p = len(pattern)
    for j in range(start, len(sigs) - p + 1):
        if sigs[j : j + p] == pattern:
            return j
    return None


def iteration_times(
    calls: Sequence[CommCall], period: int, rank: Optional[int] = None
) -> IterationSeries:
    """Per-iteration durations from the first call of each period block.

    A block whose signatures break the pattern triggers a resynchronization:
    the search skips ahead to the next block matching the pattern (or, if
    the pattern never recurs, to a freshly detected period) and no duration
    spans the gap. Resync points are kept in ``IterationSeries.breaks``.
    """
    if period < 1:
        raise InvalidInputError("period must be positive")
    if len(calls) < 2 * period:
        raise InsufficientDataError(
            f"need at least {2 * period} calls for period {period}, got {len(calls)}"
        )
    sigs = [c.signature for c in calls]
    ts = [c.timestamp for c in calls]
    rank = calls[0].rank if rank is None else rank

    durations: List[float] = []
    starts: List[int] = []
    breaks: List[int] = []
    pattern = sigs[:period]
    prev: Optional[int] = None
    i = 0
    while i + period <= len(sigs):
        if sigs[i : i + period] != pattern:
            j = _find_block(sigs, pattern, i + 1)
            if j is None:
                rest = signature_codes(calls[i:])
                try:
                    new_period = detect_period(rest)
                except InsufficientDataError:
                    new_period = None
                if new_period is None:
                    break
                j = i
                period = new_period
                pattern = sigs[i : i + period]
            if durations:
                breaks.append(len(durations))
            prev = None
            i = j
            continue
        if prev is not None:
            durations.append(ts[i] - ts[prev])
            starts.append(prev)
        prev = i
        i += period
    # the final complete block has no successor anchor; close it with the
    # first call past it when one exists
    if prev is not None and prev + period < len(sigs) and sigs[prev + period] == pattern[0]:
        durations.append(ts[prev + period] - ts[prev])
        starts.append(prev)
    return IterationSeries(rank, tuple(durations), tuple(starts), tuple(breaks))


# ---------------------------------------------------------------------------
# Bayesian online change-point detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BocdState:
    """Run-length posterior with Normal-Inverse-Gamma statistics per run.

    Observations are log durations, so multiplicative slowdowns become level
    shifts and the detector is indifferent to the time unit.
    """

    hazard: float = 1.0 / HAZARD_LAMBDA
    threshold: float = CHANGE_THRESHOLD
    kappa0: float = 0.1
    alpha0: float = 1.0
    beta0: float = 1e-3
    mu0: Optional[float] = None
    prune_below: float = 1e-6
    max_runs: int = int(10 * HAZARD_LAMBDA)
    t: int = 0
    run_lengths: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    probs: np.ndarray = field(default_factory=lambda: np.ones(1))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(1))
    kappa: np.ndarray = field(default_factory=lambda: np.full(1, 0.1))
    alpha: np.ndarray = field(default_factory=lambda: np.ones(1))
    beta: np.ndarray = field(default_factory=lambda: np.full(1, 1e-3))

    @classmethod
    def create(cls, hazard_lambda: float = HAZARD_LAMBDA, threshold: float = CHANGE_THRESHOLD, **prior):
        kappa0 = prior.get("kappa0", 0.1)
        alpha0 = prior.get("alpha0", 1.0)
        beta0 = prior.get("beta0", 1e-3)
        return cls(
            hazard=1.0 / hazard_lambda,
            threshold=threshold,
            kappa0=kappa0,
            alpha0=alpha0,
            beta0=beta0,
            mu0=prior.get("mu0"),
            max_runs=int(10 * hazard_lambda),
            kappa=np.full(1, kappa0),
            alpha=np.full(1, alpha0),
            beta=np.full(1, beta0),
            mu=np.full(1, prior.get("mu0") or 0.0),
        )

    @property
    def map_run_length(self) -> int:
        return int(self.run_lengths[np.argmax(self.probs)])


def _student_t_logpdf(y, mu, kappa, alpha, beta):
    nu = 2.0 * alpha
    scale2 = beta * (kappa + 1.0) / (alpha * kappa)
    z2 = (y - mu) ** 2 / scale2
    return (
        gammaln((nu + 1.0) / 2.0)
        - gammaln(nu / 2.0)
        - 0.5 * np.log(np.pi * nu * scale2)
        - (nu + 1.0) / 2.0 * np.log1p(z2 / nu)
    )


def _student_t_logpdf_scalar(y, mu, kappa, alpha, beta):
    nu = 2.0 * alpha
    scale2 = beta * (kappa + 1.0) / (alpha * kappa)
    return (
        math.lgamma((nu + 1.0) / 2.0)
        - math.lgamma(nu / 2.0)
        - 0.5 * math.log(math.pi * nu * scale2)
        - (nu + 1.0) / 2.0 * math.log1p((y - mu) ** 2 / scale2 / nu)
    )


def bocd_update(state: BocdState, x: float) -> Tuple[BocdState, float]:
    """Advance the run-length posterior by one observation.

    The growth branch scores ``x`` under each run's posterior predictive;
    the change-point branch scores it under the prior predictive (a fresh
    run has seen no data). Returns the new state and ``Pr(r_t = 0 | x_1:t)``.
    """
    if not x > 0:
        raise InvalidInputError(f"durations must be positive, got {x}")
    y = math.log(x)
    s = state
    if s.mu0 is None:
        s = replace(s, mu0=y, mu=np.full_like(s.mu, y))
    H = s.hazard

    log_pred = _student_t_logpdf(y, s.mu, s.kappa, s.alpha, s.beta)
    log_prior_pred = _student_t_logpdf_scalar(y, s.mu0, s.kappa0, s.alpha0, s.beta0)
    log_growth = np.log(s.probs) + log_pred + math.log1p(-H)
    log_cp = math.log(H) + log_prior_pred  # sum over r_{t-1} of the prior mass is 1

    joint = np.concatenate(([log_cp], log_growth))
    joint -= joint.max()
    probs = np.exp(joint)
    probs /= probs.sum()
    cp_prob = float(probs[0])

    run_lengths = np.concatenate(([0], s.run_lengths + 1))
    # statistics of each run after absorbing y
    mu_prev = np.concatenate(([s.mu0], s.mu))
    kappa_prev = np.concatenate(([s.kappa0], s.kappa))
    alpha_prev = np.concatenate(([s.alpha0], s.alpha))
    beta_prev = np.concatenate(([s.beta0], s.beta))
    kappa = kappa_prev + 1.0
    mu = (kappa_prev * mu_prev + y) / kappa
    alpha = alpha_prev + 0.5
    beta = beta_prev + kappa_prev * (y - mu_prev) ** 2 / (2.0 * kappa)

    keep = probs >= s.prune_below
    if keep.sum() > s.max_runs:
        top = np.argsort(probs)[::-1][: s.max_runs]
        keep = np.zeros_like(keep)
        keep[top] = True
    if not keep.any():
        keep[np.argmax(probs)] = True
    probs = probs[keep]
    probs /= probs.sum()

    new = replace(
        s,
        t=s.t + 1,
        run_lengths=run_lengths[keep],
        probs=probs,
        mu=mu[keep],
        kappa=kappa[keep],
        alpha=alpha[keep],
        beta=beta[keep],
    )
    return new, cp_prob


def bocd_probabilities(values: Sequence[float], **kwargs) -> np.ndarray:
    """``Pr(r_t = 0 | x_1:t)`` for every sample of ``values``."""
    state = BocdState.create(**kwargs)
    out = np.empty(len(values))
    for i, v in enumerate(values):
        state, out[i] = bocd_update(state, v)
    return out


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChangePoint:
    index: int
    direction: str  # "degrade" or "recover"
    mean_before: float
    mean_after: float

    @property
    def ratio(self) -> float:
        return self.mean_after / self.mean_before


def verify_changepoint(
    series,
    cp: int,
    window: int = VERIFY_WINDOW,
    start: Optional[int] = None,
    stop: Optional[int] = None,
    jitter: float = JITTER_THRESHOLD,
) -> Optional[ChangePoint]:
    """Compare mean duration before and after ``cp``; None means jitter.

    The before window is the last ``window`` samples of ``[start, cp)``; the
    after window is the first ``window`` samples of ``[cp, stop)``.
    """
    x = series.values if isinstance(series, IterationSeries) else np.asarray(series, dtype=float)
    lo = 0 if start is None else start
    hi = len(x) if stop is None else stop
    if not (lo < cp < hi):
        raise InvalidInputError("change-point needs at least one sample on each side")
    before = x[max(lo, cp - window) : cp]
    after = x[cp : min(hi, cp + window)]
    mb, ma = float(before.mean()), float(after.mean())
    if abs(ma - mb) / mb < jitter:
        return None
    return ChangePoint(cp, "degrade" if ma > mb else "recover", mb, ma)


class OnlineDetector:
    """Streaming BOCD plus verification.

    A candidate is raised when ``Pr(r_t = 0)`` reaches the threshold, or when
    the posterior puts that much mass on a run that began within the last
    ``recent`` samples (gradual drifts never produce a sharp ``r_t = 0``
    spike); the candidate index is then where that run began.

    Each candidate is verified once ``window``
    samples follow it or the next candidate arrives, whichever is first.
    A candidate whose first ``min_after`` samples already differ by the
    jitter threshold is accepted early; rejection always waits.
    The reference level is the verified regime up to its first candidate,
    so a run of sub-threshold candidates (a slow ramp) is still measured
    against the last verified level. With nothing pending, the latest full
    window is also compared with the regime's first one, which catches
    drifts BOCD has adapted to.
    """

    def __init__(
        self,
        window: int = VERIFY_WINDOW,
        threshold: float = CHANGE_THRESHOLD,
        hazard_lambda: float = HAZARD_LAMBDA,
        jitter: float = JITTER_THRESHOLD,
        recent: int = 5,
        min_after: int = 5,
    ):
        if window < 1:
            raise InvalidInputError("verification window must be positive")
        self.window = window
        self.jitter = jitter
        self.recent = recent
        self.min_after = min(min_after, window)
        self.state = BocdState.create(hazard_lambda=hazard_lambda, threshold=threshold)
        self.values: List[float] = []
        self.probs: List[float] = []
        self.candidates: List[int] = []
        self.changepoints: List[ChangePoint] = []
        self._pending: List[int] = []
        self._regime_start = 0
        self._ref_stop: Optional[int] = None

    def update(self, x: float) -> List[ChangePoint]:
        """Consume one duration; return change-points verified at this step."""
        t = len(self.values)
        self.values.append(float(x))
        self.state, p = bocd_update(self.state, x)
        self.probs.append(p)
        out: List[ChangePoint] = []
        cand = self._candidate(t, p)
        if cand is not None:
            self.candidates.append(cand)
            # a new candidate closes the after-window of every pending one
            out += self._resolve(stop=cand)
            self._pending.append(cand)
        n = len(self.values)
        while self._pending and n - self._pending[0] >= self.window:
            out += self._verify(self._pending.pop(0), stop=n)
        while self._pending and n - self._pending[0] >= self.min_after:
            got = self._verify(self._pending[0], stop=n, early=True)
            if not got:
                break
            self._pending.pop(0)
            out += got
        if not self._pending:
            out += self._check_drift(n)
        return out

    def _check_drift(self, n: int) -> List[ChangePoint]:
        """Compare the latest full window with the regime's reference level.

        BOCD adapts to a slow drift and stops raising candidates. The onset
        is the first rejected candidate if there is one, otherwise the start
        of the window that moved."""
        w = self.window
        if self._ref_stop is not None:
            onset = self._ref_stop
            if n - onset < w:
                return []
            before = self.values[max(self._regime_start, onset - w) : onset]
        else:
            if n - self._regime_start < 2 * w:
                return []
            onset = n - w
            before = self.values[self._regime_start : self._regime_start + w]
        if not before:
            return []
        after = self.values[n - w : n]
        mb, ma = sum(before) / len(before), sum(after) / len(after)
        if abs(ma - mb) / mb < self.jitter:
            return []
        cpt = ChangePoint(onset, "degrade" if ma > mb else "recover", mb, ma)
        self.changepoints.append(cpt)
        self._regime_start = n - w
        self._ref_stop = None
        return [cpt]

    def _candidate(self, t: int, p0: float) -> Optional[int]:
        last = self.candidates[-1] if self.candidates else 0
        thr = self.state.threshold
        if p0 >= thr:
            return t if t > last else None
        recent = self.state.run_lengths < self.recent
        if self.state.probs[recent].sum() >= thr:
            r = int(self.state.run_lengths[recent][np.argmax(self.state.probs[recent])])
            cp = t - r
            return cp if cp > last else None
        return None

    def flush(self) -> List[ChangePoint]:
        return self._resolve(stop=len(self.values))

    def _resolve(self, stop: int) -> List[ChangePoint]:
        out = []
        while self._pending:
            out += self._verify(self._pending.pop(0), stop=stop)
        return out

    def _verify(self, cp: int, stop: int, early: bool = False) -> List[ChangePoint]:
        ref_stop = cp if self._ref_stop is None else min(self._ref_stop, cp)
        x = np.asarray(self.values)
        before = x[max(self._regime_start, ref_stop - self.window) : ref_stop]
        after = x[cp : min(stop, cp + self.window)]
        if before.size == 0 or after.size == 0:
            return []
        mb, ma = float(before.mean()), float(after.mean())
        if abs(ma - mb) / mb < self.jitter:
            if early:
                return []
            if self._ref_stop is None:
                self._ref_stop = cp
            return []
        cpt = ChangePoint(cp, "degrade" if ma > mb else "recover", mb, ma)
        self.changepoints.append(cpt)
        self._regime_start = cp
        self._ref_stop = None
        return [cpt]


def pair_events(changepoints: Sequence[ChangePoint], jitter: float = JITTER_THRESHOLD) -> List[FailSlowEvent]:
    """Turn verified change-points into degradation intervals.

    An event stays open through partial recoveries until the level is back
    within ``jitter`` of the pre-event baseline.
    """
    events: List[FailSlowEvent] = []
    onset: Optional[int] = None
    healthy = peak = 0.0
    for cp in changepoints:
        if cp.direction == "degrade":
            if onset is None:
                onset, healthy, peak = cp.index, cp.mean_before, cp.mean_after
            else:
                peak = max(peak, cp.mean_after)
        elif onset is not None:
            if cp.mean_after <= healthy * (1.0 + jitter):
                events.append(
                    FailSlowEvent(onset, cp.index, "unknown", None, max(1.0, peak / healthy), healthy)
                )
                onset = None
    if onset is not None:
        events.append(FailSlowEvent(onset, None, "unknown", None, max(1.0, peak / healthy), healthy))
    return events


def detect_failslow(
    series,
    window: int = VERIFY_WINDOW,
    threshold: float = CHANGE_THRESHOLD,
    hazard_lambda: float = HAZARD_LAMBDA,
    jitter: float = JITTER_THRESHOLD,
) -> List[FailSlowEvent]:
    """BOCD with verification over a whole series."""
    x = series.values if isinstance(series, IterationSeries) else np.asarray(series, dtype=float)
    if len(x) == 0:
        raise InsufficientDataError("empty iteration series")
    det = OnlineDetector(window, threshold, hazard_lambda, jitter)
    for v in x:
        det.update(v)
    det.flush()
    return pair_events(det.changepoints, jitter)


def bocd_raw_detect(
    series,
    threshold: float = CHANGE_THRESHOLD,
    hazard_lambda: float = HAZARD_LAMBDA,
) -> List[int]:
    """Every sample BOCD alone would report as a change-point."""
    x = series.values if isinstance(series, IterationSeries) else np.asarray(series, dtype=float)
    det = OnlineDetector(threshold=threshold, hazard_lambda=hazard_lambda)
    for v in x:
        det.update(v)
    return list(det.candidates)


def slide_window_detect(series, window: int = 10, threshold: float = JITTER_THRESHOLD) -> List[FailSlowEvent]:
    """Baseline: flag samples deviating more than ``threshold`` from the
    median of the preceding ``window`` samples; contiguous flags form one event."""
    if window < 2:
        raise InvalidInputError("window must be at least 2")
    x = series.values if isinstance(series, IterationSeries) else np.asarray(series, dtype=float)
    events: List[FailSlowEvent] = []
    onset: Optional[int] = None
    worst = 1.0
    for i in range(window, len(x)):
        ref = median(x[i - window : i])
        flagged = abs(x[i] - ref) / ref > threshold
        if flagged:
            if onset is None:
                onset, worst = i, 1.0
            worst = max(worst, x[i] / ref)
        elif onset is not None:
            events.append(FailSlowEvent(onset, i, "unknown", None, worst, None))
            onset = None
    if onset is not None:
        events.append(FailSlowEvent(onset, None, "unknown", None, worst, None))
    return events
