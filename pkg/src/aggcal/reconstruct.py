"""Pseudo patient-level data from published curves, and target bootstrapping.

Reconstruction follows the standard published-curve inversion: per at-risk
interval, events are read off the survival jumps, censorings are placed
uniformly to reconcile the published at-risk counts, and the event total is
rebalanced to the published count. Fractional per-point event counts are
rounded by largest remainder within each interval so interval totals are
preserved with minimal distortion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSpec, ExactQuantile, SigmoidQuantile
from .errors import InconsistentCurveError
from .model import rng_from_seed
from .survival import curve_landmark, curve_quantile, weighted_km

_BOOT_STREAM = 211


def _prepare_points(times, survival):
    """Merge duplicate times (mean survival), drop plateau repeats, check shape."""
    t = np.asarray(times, dtype=float)
    s = np.asarray(survival, dtype=float)
    if t.size == 0 or t.shape != s.shape:
        raise InconsistentCurveError("curve needs matching non-empty times and survival")
    if np.any(s < -1e-12) or np.any(s > 1 + 1e-12):
        raise InconsistentCurveError("survival values must lie in [0, 1]")
    order = np.argsort(t, kind="stable")
    t, s = t[order], s[order]
    ut, inv = np.unique(t, return_inverse=True)
    us = np.zeros_like(ut)
    counts = np.zeros_like(ut)
    np.add.at(us, inv, s)
    np.add.at(counts, inv, 1.0)
    us = us / counts
    keep_t, keep_s = [ut[0]], [us[0]]
    for i in range(1, len(ut)):
        if us[i] > keep_s[-1] + 1e-9:
            raise InconsistentCurveError(f"survival rises at t={ut[i]:g}", interval=i)
        if us[i] < keep_s[-1] - 1e-12:
            keep_t.append(ut[i])
            keep_s.append(us[i])
    return np.array(keep_t), np.array(keep_s)


@dataclass(frozen=True)
class DigitizedCurve:
    """Digitized (time, survival) points of a published curve."""

    times: np.ndarray
    survival: np.ndarray
    label: str = ""

    def __post_init__(self):
        t, s = _prepare_points(self.times, self.survival)
        if t[0] > 0.0 and s[0] < 1.0:
            t = np.concatenate([[0.0], t])
            s = np.concatenate([[1.0], s])
        if t[0] == 0.0 and s[0] < 1.0 - 1e-9:
            raise InconsistentCurveError("survival must start at 1")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "survival", s)

    def survival_at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


@dataclass(frozen=True)
class AtRiskTable:
    """Published number-at-risk rows: (interval start, count)."""

    times: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        n = np.asarray(self.counts, dtype=float)
        if t.size == 0 or t.shape != n.shape:
            raise ValueError("at-risk table needs matching non-empty arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("at-risk times must increase")
        if np.any(np.diff(n) > 0) or np.any(n < 0):
            raise ValueError("at-risk counts must be non-increasing and non-negative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "counts", n.astype(int))


@dataclass(frozen=True)
class PseudoIPD:
    """Reconstructed rows: (time in days, event flag)."""

    times: np.ndarray
    events: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "events", np.asarray(self.events, dtype=bool))

    @property
    def size(self) -> int:
        return self.times.shape[0]

    @property
    def total_events(self) -> int:
        return int(self.events.sum())


def _largest_remainder(real_counts, total: int):
    """Integer rounding of non-negative reals preserving the given total."""
    real = np.maximum(np.asarray(real_counts, dtype=float), 0.0)
    base = np.floor(real).astype(int)
    short = int(total) - int(base.sum())
    if short > 0:
        order = np.argsort(-(real - base), kind="stable")
        for i in range(short):
            base[order[i % len(base)]] += 1
    elif short < 0:
        order = np.argsort(real - base, kind="stable")
        removed = 0
        for i in order:
            while base[i] > 0 and removed < -short:
                base[i] -= 1
                removed += 1
            if removed >= -short:
                break
    return base


def guyot_reconstruct(curve: DigitizedCurve, at_risk: AtRiskTable, total_events: int,
                      label: str | None = None) -> PseudoIPD:
    """Rebuild per-subject (time, event) rows from a published curve.

    Within each at-risk interval the censoring count is iterated until the
    implied number at risk at the next interval start matches the published
    count; events come from the survival jumps with a running product
    correction, then the grand event total is pinned to `total_events`.
    """
    pts_t, pts_s = curve.times, curve.survival
    bounds = np.concatenate([at_risk.times, [np.inf]])
    n0 = int(at_risk.counts[0])
    if total_events > n0:
        raise InconsistentCurveError("more events than subjects at risk")
    if pts_t[0] < bounds[0]:
        raise InconsistentCurveError("curve starts before the at-risk table")

    # interval index of each digitized point
    interval_of = np.searchsorted(at_risk.times, pts_t, side="right") - 1

    d_int = np.zeros(len(pts_t), dtype=int)  # events committed at each point
    d_resid = np.zeros(len(pts_t))  # real-minus-integer residuals (for rebalance)
    cens_times: list = []
    cens_count = np.zeros(len(at_risk.times), dtype=int)
    km = 1.0
    n_run = float(n0)

    for j in range(len(at_risk.times)):
        pts = np.flatnonzero(interval_of == j)
        start, end = bounds[j], bounds[j + 1]
        last = j == len(at_risk.times) - 1
        n_start, km_start = n_run, km

        def censor_times_for(c_count):
            span_end = end if np.isfinite(end) else (pts_t[-1] if pts.size else start)
            if c_count <= 0 or span_end <= start:
                return []
            return [start + (k + 0.5) * (span_end - start) / c_count for k in range(c_count)]

        def real_walk(c_count):
            """Sequential real-valued event counts; returns (reals, at-risk after)."""
            ct = censor_times_for(c_count)
            n_loc, km_loc = n_start, km_start
            prev = start
            reals = []
            for i in pts:
                n_loc -= sum(1 for c in ct if prev <= c < pts_t[i])
                if n_loc <= 0 or km_loc <= 0:
                    reals.append(0.0)
                    prev = pts_t[i]
                    continue
                d = min(max(n_loc * (1.0 - pts_s[i] / km_loc), 0.0), n_loc)
                reals.append(d)
                km_loc *= 1.0 - d / n_loc
                n_loc -= d
                prev = pts_t[i]
            n_loc -= sum(1 for c in ct if c >= prev)
            return reals, n_loc

        def commit(c_count):
            """Round the interval's events (largest remainder) and replay."""
            reals, _ = real_walk(c_count)
            ct = censor_times_for(c_count)
            total = int(round(sum(reals)))
            ints = _largest_remainder(reals, total) if pts.size else np.zeros(0, dtype=int)
            n_loc, km_loc = n_start, km_start
            prev = start
            for k, i in enumerate(pts):
                n_loc -= sum(1 for c in ct if prev <= c < pts_t[i])
                take = int(min(ints[k], max(int(n_loc), 0)))
                if take > 0 and n_loc > 0:
                    km_loc *= 1.0 - take / n_loc
                d_int[i] = take
                d_resid[i] = reals[k] - take
                n_loc -= take
                prev = pts_t[i]
            n_loc -= sum(1 for c in ct if c >= prev)
            return n_loc, km_loc, ct

        if last:
            n_run, km, ct = commit(0)
            cens_count[j] = 0
        else:
            target = int(at_risk.counts[j + 1])
            s_lo = curve.survival_at(start)
            s_hi = curve.survival_at(end - 1e-9)
            guess = int(round(n_start * (s_hi / s_lo if s_lo > 0 else 0.0))) - target
            c = max(0, min(int(n_start), guess))
            best_c, best_gap = c, np.inf
            seen = set()
            for _ in range(60):
                _, n_next = real_walk(c)
                gap = int(round(n_next)) - target
                if abs(n_next - target) < abs(best_gap):
                    best_c, best_gap = c, n_next - target
                if gap == 0 or c in seen:
                    break
                seen.add(c)
                c = max(0, min(int(n_start), c + gap))
            if c in seen and best_c != c:
                c = best_c
            n_run, km, ct = commit(c)
            # exact reconciliation: absorb integer slack into the censor count
            slack = int(round(n_run)) - target
            c2 = c + slack
            if slack != 0 and 0 <= c2 <= int(n_start):
                n_run, km, ct = commit(c2)
                c = c2
            cens_count[j] = c
            cens_times.extend(ct)

    # pin the event total: trade events against censorings, latest interval first
    diff = int(total_events) - int(d_int.sum())
    if diff != 0:
        _rebalance_events(diff, d_int, d_resid, interval_of, cens_count, cens_times,
                          at_risk, bounds, pts_t)
    if int(d_int.sum()) != int(total_events):
        raise InconsistentCurveError(
            f"cannot reconcile event total {total_events} (reached {int(d_int.sum())})")

    rows_t = np.repeat(pts_t, d_int).tolist()
    rows_e = [True] * len(rows_t)
    rows_t += list(cens_times)
    rows_e += [False] * len(cens_times)
    survivors = n0 - len(rows_t)
    if survivors < 0:
        raise InconsistentCurveError("reconstruction used more subjects than at risk")
    t_end = float(pts_t[-1])
    rows_t += [t_end] * survivors
    rows_e += [False] * survivors
    order = np.argsort(rows_t, kind="stable")
    return PseudoIPD(times=np.asarray(rows_t)[order], events=np.asarray(rows_e)[order],
                     label=curve.label if label is None else label)


def _rebalance_events(diff, d_int, d_resid, interval_of, cens_count, cens_times,
                      at_risk, bounds, pts_t):
    """Adjust event counts by +/-1 at the softest points to hit the total.

    Inside a non-final interval each added (removed) event is paired with a
    removed (added) censoring so the published at-risk counts stay
    reconciled; the final interval absorbs changes against its survivors.
    """
    last_j = len(at_risk.times) - 1
    for j in range(last_j, -1, -1):
        if diff == 0:
            break
        pts = np.flatnonzero(interval_of == j)
        if pts.size == 0:
            continue
        order = pts[np.argsort(-d_resid[pts], kind="stable")] if diff > 0 \
            else pts[np.argsort(d_resid[pts], kind="stable")]
        for i in order:
            if diff == 0:
                break
            if diff > 0:
                if j != last_j:
                    if cens_count[j] <= 0:
                        break
                    cens_count[j] -= 1
                    _drop_one_censor(cens_times, bounds[j], bounds[j + 1])
                d_int[i] += 1
                diff -= 1
            else:
                if d_int[i] <= 0:
                    continue
                d_int[i] -= 1
                if j != last_j:
                    cens_count[j] += 1
                    cens_times.append(float(pts_t[i]))
                diff += 1


def _drop_one_censor(cens_times, lo, hi):
    for k in range(len(cens_times) - 1, -1, -1):
        if lo <= cens_times[k] < hi:
            cens_times.pop(k)
            return


def bootstrap_ipd(ipd: PseudoIPD, replicates: int, seed) -> list:
    """With-replacement row resamples, one deterministic stream per replicate."""
    if replicates < 1:
        raise ValueError("need at least one replicate")
    out = []
    for b in range(replicates):
        rng = rng_from_seed((seed, _BOOT_STREAM, b))
        idx = rng.integers(0, ipd.size, size=ipd.size)
        out.append(PseudoIPD(times=ipd.times[idx], events=ipd.events[idx],
                             label=f"{ipd.label}#boot{b}"))
    return out


@dataclass(frozen=True)
class PerturbedTargets:
    """Outcome targets recomputed from one bootstrap replicate."""

    replicate_index: int
    seed: object
    targets: tuple
    dropped: tuple = ()  # labels of constraints undefined on this replicate


def recompute_targets(replicate: PseudoIPD, reference_targets, *, replicate_index: int = -1,
                      seed=None) -> PerturbedTargets:
    """Re-read every quantile-typed target off the replicate's refitted curve.

    Median-style entries (target 0.5) keep their percentile and move their
    threshold to the replicate's median time; landmark-style entries keep
    their threshold and take the replicate's survival there. Entries the
    replicate cannot define (curve never crosses, or landmark pinned at
    0/1) are dropped and reported.
    """
    curve = weighted_km(replicate.times, replicate.events)
    targets, dropped = [], []
    for c in reference_targets:
        stat = c.statistic
        if not isinstance(stat, (ExactQuantile, SigmoidQuantile)):
            raise ValueError(f"target {c.name!r} is not quantile-typed")
        if abs(c.target - 0.5) < 1e-12:
            t_new = curve_quantile(curve, 0.5)
            if t_new is None:
                dropped.append(c.name)
                continue
            new_stat = (SigmoidQuantile(threshold=t_new, scale=stat.scale)
                        if isinstance(stat, SigmoidQuantile) else ExactQuantile(threshold=t_new))
            targets.append(ConstraintSpec(new_stat, c.target, c.mode, c.penalty, c.label))
        else:
            s_new = curve_landmark(curve, stat.threshold)
            p_new = 1.0 - s_new
            if not 0.0 < p_new < 1.0:
                dropped.append(c.name)
                continue
            targets.append(ConstraintSpec(stat, p_new, c.mode, c.penalty, c.label))
    return PerturbedTargets(replicate_index=replicate_index, seed=seed,
                            targets=tuple(targets), dropped=tuple(dropped))
