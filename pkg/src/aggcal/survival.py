"""Weighted survival estimators: Kaplan-Meier, RMST, and a two-arm Cox fit.

Conventions, stated because they matter on small fixtures: censorings that
share an event time remain in the risk set for that event (events first);
RMST beyond the last observed time extends the final survival value; Cox
ties are handled by Breslow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NonIdentifiableError


@dataclass(frozen=True)
class WeightedTimeToEvent:
    """One observation: time in days, event flag (False = censored), weight."""

    time: float
    event: bool
    weight: float = 1.0


@dataclass(frozen=True)
class SurvivalCurve:
    """Step-function survival estimate: S(t) = survival[i] for t >= times[i]."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "survival", np.asarray(self.survival, dtype=float))
        s = self.survival
        if s.size and (np.any(s > 1.0 + 1e-12) or np.any(s < -1e-12) or np.any(np.diff(s) > 1e-12)):
            raise ValueError("survival must be non-increasing within [0, 1]")


def _as_arrays(times, events, weights):
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    if t.size == 0:
        raise DegenerateInputError("no observations")
    if t.shape != e.shape or t.shape != w.shape:
        raise ValueError("times, events, weights must share a shape")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValueError("times must be finite and non-negative")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise DegenerateInputError("total weight is zero")
    return t, e, w


def weighted_km(times, events, weights=None) -> SurvivalCurve:
    """Product-limit estimator with weighted risk sets and event counts."""
    t, e, w = _as_arrays(times, events, weights)
    order = np.argsort(t, kind="stable")
    t, e, w = t[order], e[order], w[order]
    uniq = np.unique(t)
    # weight still at risk just before each distinct time
    total = w.sum()
    cum_before = np.concatenate([[0.0], np.cumsum(w)])
    out_t, out_s, out_r = [], [], []
    s = 1.0
    left = np.searchsorted(t, uniq, side="left")
    right = np.searchsorted(t, uniq, side="right")
    for k, tk in enumerate(uniq):
        at_risk = total - cum_before[left[k]]
        d = w[left[k]:right[k]][e[left[k]:right[k]]].sum()
        if d > 0:
            s *= max(0.0, 1.0 - d / at_risk)
            out_t.append(tk)
            out_s.append(s)
            out_r.append(at_risk)
    return SurvivalCurve(np.array(out_t), np.array(out_s), np.array(out_r))


def curve_landmark(curve: SurvivalCurve, t: float) -> float:
    """S(t) read off the step function; 1 before the first event."""
    idx = np.searchsorted(curve.times, t, side="right") - 1
    return 1.0 if idx < 0 else float(curve.survival[idx])


def curve_quantile(curve: SurvivalCurve, p: float):
    """Smallest time with S <= 1 - p, or None when the curve never crosses."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    hit = np.flatnonzero(curve.survival <= (1.0 - p) + 1e-12)
    return None if hit.size == 0 else float(curve.times[hit[0]])


def rmst(curve: SurvivalCurve, tau: float) -> float:
    """Integral of the survival step function on [0, tau].

    Beyond the last observed time the final survival value is carried
    forward, so the result is the step-function reading of the curve.
    """
    if not tau > 0:
        raise ValueError("horizon must be positive")
    knots = np.concatenate([[0.0], curve.times])
    vals = np.concatenate([[1.0], curve.survival])
    area = 0.0
    for i in range(len(knots)):
        seg_start = knots[i]
        seg_end = knots[i + 1] if i + 1 < len(knots) else tau
        if seg_start >= tau:
            break
        area += vals[i] * (min(seg_end, tau) - seg_start)
    return float(area)


@dataclass(frozen=True)
class CoxResult:
    hazard_ratio: float
    log_hr: float
    se_model: float
    se_robust: float
    iterations: int


def weighted_cox_hr(times_a, events_a, weights_a, times_b, events_b, weights_b) -> CoxResult:
    """Two-arm weighted Cox fit (arm A is the index, z = 1); Breslow ties.

    Returns the hazard ratio of arm A relative to arm B with both the
    model-based and the robust (sandwich) standard error of log HR.
    """
    ta, ea, wa = _as_arrays(times_a, events_a, weights_a)
    tb, eb, wb = _as_arrays(times_b, events_b, weights_b)
    if not np.any(ea & (wa > 0)) or not np.any(eb & (wb > 0)):
        raise NonIdentifiableError("each arm needs at least one weighted event")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    w = np.concatenate([wa, wb])
    z = np.concatenate([np.ones_like(ta), np.zeros_like(tb)])

    order = np.argsort(t, kind="stable")
    t, e, w, z = t[order], e[order], w[order], z[order]
    uniq_times = np.unique(t)
    first_idx = np.searchsorted(t, uniq_times, side="left")
    gidx = np.searchsorted(uniq_times, t)  # subject -> distinct-time index

    d_w = np.zeros(len(uniq_times))  # weighted events at each distinct time
    d_wz = np.zeros(len(uniq_times))
    np.add.at(d_w, gidx, w * e)
    np.add.at(d_wz, gidx, w * e * z)
    is_event_time = d_w > 0

    def risk_sums(beta):
        ez = np.exp(beta * z)
        s0 = np.cumsum((w * ez)[::-1])[::-1][first_idx]  # sum over {t_j >= s}
        s1 = np.cumsum((w * ez * z)[::-1])[::-1][first_idx]
        return np.where(s0 > 0, s1 / s0, 0.0), s0

    beta = 0.0
    it = 0
    info = np.nan
    for it in range(1, 101):
        mean_z, _ = risk_sums(beta)
        u = float(np.sum(d_wz[is_event_time] - d_w[is_event_time] * mean_z[is_event_time]))
        info = float(np.sum(d_w[is_event_time] * mean_z[is_event_time] * (1 - mean_z[is_event_time])))
        if info <= 0:
            raise NonIdentifiableError("zero information in the partial likelihood")
        step = float(np.clip(u / info, -2.0, 2.0))
        beta += step
        if abs(u) < 1e-12 or abs(step) < 1e-14:
            break

    se_model = 1.0 / np.sqrt(info)
    mean_z, s0 = risk_sums(beta)
    se_robust = _robust_se(t, e, w, z, beta, gidx, mean_z, s0, d_w, is_event_time, info)
    return CoxResult(
        hazard_ratio=float(np.exp(beta)), log_hr=float(beta),
        se_model=float(se_model), se_robust=float(se_robust), iterations=it)


def _robust_se(t, e, w, z, beta, gidx, mean_z, s0, d_w, is_event_time, info):
    """Lin-Wei sandwich variance for the weighted two-arm fit."""
    ez = np.exp(beta * z)
    haz = np.where(is_event_time & (s0 > 0), d_w / np.where(s0 > 0, s0, 1.0), 0.0)
    # cumulative over event times up to each subject's time (ascending order)
    cum_h = np.cumsum(haz)
    cum_hz = np.cumsum(haz * mean_z)
    resid = e * (z - mean_z[gidx]) - ez * (z * cum_h[gidx] - cum_hz[gidx])
    meat = np.sum((w * resid) ** 2)
    return np.sqrt(meat) / info
