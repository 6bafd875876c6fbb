"""Particle Metropolis-Hastings over outcomes with adaptive multipliers.

The chain state is one outcome per cohort particle. Proposals are fresh
draws from the model's conditional sampler, so the reference density
cancels from the acceptance ratio and is never evaluated; the tilt
multipliers are adapted on-line by a Robbins-Monro recursion driven by the
weighted constraint estimates. Convergence is monitored with a windowed
acceptance rate and a Gelman-Rubin statistic across data-parallel cohort
partitions.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    ExactQuantile,
    SigmoidQuantile,
    SubgroupScoped,
    evaluate_statistic,
    is_outcome_statistic,
)
from .errors import EmptySubgroupError
from .model import rng_from_seed, sample_conditional_batch

_INIT_STREAM = 101
_STEP_STREAM = 103


@dataclass(frozen=True)
class StepSchedule:
    """Polynomial-decay step sizes gamma_t = gamma0 / (t0 + t)^decay."""

    gamma0: float = 1.0
    decay: float = 0.6
    t0: float = 1.0
    clip: float = 0.5  # per-step multiplier change is bounded by +/- clip

    def __post_init__(self):
        if not self.gamma0 > 0 or not self.clip > 0 or self.t0 < 0:
            raise ValueError("gamma0 and clip must be positive, t0 non-negative")
        if not 0.5 < self.decay <= 1.0:
            raise ValueError("decay exponent must lie in (1/2, 1]")

    def at(self, t: int) -> float:
        return self.gamma0 / (self.t0 + t) ** self.decay


@dataclass
class SamplerSettings:
    """Stage-2 hyperparameters; defaults are the reference configuration."""

    proposal_rate: float = 1e-3  # alpha: per-particle Bernoulli inclusion scale
    sigmoid_scale_days: float = 10.0  # default smoothing scale for quantile targets
    schedule: StepSchedule = field(default_factory=StepSchedule)
    partitions: int = 400
    theta: float = 50.0  # aggregate hard-residual threshold in the stopping rule
    t_max: int = 1_000_000
    burn_in: int | None = None  # None: adaptive (first time the stopping rule holds)
    spacing: int = 100
    chain_depth: int = 64
    rhat_threshold: float = 1.05
    soft_tolerance: float = 1e-3
    accept_window: int = 1000
    diag_stride: int = 25
    min_diag_points: int = 10
    rhat_window: int = 40
    residual_aggregator: str = "sum"  # "sum" | "max"

    def validate(self):
        if not 0.0 < self.proposal_rate <= 1.0:
            raise ValueError("proposal rate must lie in (0, 1]")
        if self.partitions < 2:
            raise ValueError("need at least 2 diagnostic partitions")
        if self.spacing < 1 or self.chain_depth < 1 or self.t_max < 1:
            raise ValueError("spacing, chain depth and t_max must be positive")
        if self.residual_aggregator not in ("sum", "max"):
            raise ValueError("residual aggregator must be 'sum' or 'max'")
        if not self.sigmoid_scale_days > 0 or not self.theta > 0:
            raise ValueError("sigmoid scale and theta must be positive")
        return self


@dataclass
class LambdaState:
    """Tilt multipliers for the outcome constraints, plus the RM clock."""

    values: np.ndarray
    targets: tuple
    t: int = 0

    @property
    def soft_mask(self) -> np.ndarray:
        return np.array([c.mode == "soft" for c in self.targets])

    @property
    def penalties(self) -> np.ndarray:
        return np.array([c.penalty if c.mode == "soft" else np.inf for c in self.targets])

    def soft_violations(self, ghat: np.ndarray) -> np.ndarray:
        """|lambda_j + rho_j (ghat_j - c_j)| for the soft block."""
        out = []
        for j, c in enumerate(self.targets):
            if c.mode == "soft":
                out.append(abs(self.values[j] + c.penalty * (ghat[j] - c.target)))
        return np.array(out)


def init_lambda(targets) -> LambdaState:
    targets = tuple(targets)
    for c in targets:
        if not is_outcome_statistic(c.statistic):
            raise ValueError(f"target {c.name!r} is not an outcome statistic")
    return LambdaState(values=np.zeros(len(targets)), targets=targets, t=0)


@dataclass
class EnsembleState:
    """Per-particle outcomes with thinned chain storage."""

    outcomes: np.ndarray  # (N,)
    buffer: np.ndarray  # (N, chain_depth), valid columns [0, buffer_fill)
    buffer_fill: int = 0
    proposals_drawn: int = 0
    ghat: np.ndarray | None = None  # running constraint estimates of the CURRENT ensemble

    @property
    def size(self) -> int:
        return self.outcomes.shape[0]

    def record(self):
        self.buffer[:, self.buffer_fill % self.buffer.shape[1]] = self.outcomes
        self.buffer_fill += 1

    @property
    def full(self) -> bool:
        return self.buffer_fill >= self.buffer.shape[1]


@dataclass
class ChainDiagnostics:
    """Mixing and constraint-attainment summary of one chain run."""

    ready: bool = False
    acceptance_rate: float = math.nan
    acceptance_min: float = math.nan
    acceptance_max: float = math.nan
    rhat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_rhat: float = math.nan
    max_soft_violation: float = math.nan
    max_landmark_deviation_days: float = math.nan
    aggregate_hard_residual: float = math.nan
    stopping_iteration: int | None = None
    total_iterations: int = 0
    converged: bool = False
    proposals_drawn: int = 0
    labels: tuple = ()
    lambda_min: float = math.nan
    lambda_max: float = math.nan
    trace_iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    lambda_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def to_dict(self) -> dict:
        def _f(v):
            return None if (isinstance(v, float) and math.isnan(v)) else v

        return {
            "ready": self.ready,
            "acceptance_rate": _f(self.acceptance_rate),
            "acceptance_min": _f(self.acceptance_min),
            "acceptance_max": _f(self.acceptance_max),
            "rhat": [float(v) for v in self.rhat],
            "max_rhat": _f(self.max_rhat),
            "max_soft_violation": _f(self.max_soft_violation),
            "max_landmark_deviation_days": _f(self.max_landmark_deviation_days),
            "aggregate_hard_residual": _f(self.aggregate_hard_residual),
            "stopping_iteration": self.stopping_iteration,
            "total_iterations": self.total_iterations,
            "converged": self.converged,
            "proposals_drawn": self.proposals_drawn,
            "labels": list(self.labels),
            "lambda_min": _f(self.lambda_min),
            "lambda_max": _f(self.lambda_max),
        }


class _TargetContext:
    """Vectorized statistic evaluation bound to one cohort."""

    def __init__(self, cohort, targets):
        self.targets = tuple(targets)
        self.weights = cohort.weights
        self.n = cohort.size
        self.masks = []
        self.denoms = []
        for c in self.targets:
            fn = c.statistic
            if isinstance(fn, SubgroupScoped):
                mask = np.array([bool(fn.subgroup.holds(x)) for x in cohort.records])
                denom = float(self.weights[mask].sum())
                if denom <= 0:
                    raise EmptySubgroupError(f"subgroup of {c.name!r} carries zero weight")
            else:
                mask, denom = None, float(self.n)
            self.masks.append(mask)
            self.denoms.append(denom)

    @staticmethod
    def _inner(fn):
        return fn.inner if isinstance(fn, SubgroupScoped) else fn

    def eval_rows(self, y: np.ndarray, idx=None) -> np.ndarray:
        """(J, len(y)) statistic values, subgroup masks applied."""
        out = np.empty((len(self.targets), len(y)))
        for j, c in enumerate(self.targets):
            fn = self._inner(c.statistic)
            if isinstance(fn, SigmoidQuantile):
                u = np.clip((fn.threshold - y) / fn.scale, -40.0, 40.0)
                vals = 1.0 / (1.0 + np.exp(-u))
            elif isinstance(fn, ExactQuantile):
                vals = (y <= fn.threshold).astype(float)
            else:
                vals = np.array([evaluate_statistic(fn, {}, yi) for yi in y])
            mask = self.masks[j]
            if mask is not None:
                vals = vals * (mask if idx is None else mask[idx])
            out[j] = vals
        return out

    def ghat(self, fmat: np.ndarray) -> np.ndarray:
        """Weighted constraint estimates from a full (J, N) statistic matrix."""
        return np.array([
            float((fmat[j] * self.weights).sum() / self.denoms[j])
            for j in range(len(self.targets))])


def init_ensemble(cohort, model, seed, chain_depth: int = 64) -> EnsembleState:
    """One independent conditional draw per particle."""
    rng = rng_from_seed((seed, _INIT_STREAM) if np.isscalar(seed) else tuple(seed) + (_INIT_STREAM,))
    y = sample_conditional_batch(model, cohort.records, rng)
    return EnsembleState(outcomes=np.asarray(y, dtype=float),
                         buffer=np.zeros((cohort.size, chain_depth)))


def propose_block(cohort, model, alpha: float, seed):
    """Draw the inclusion mask, block proposal, and the single uniform.

    One stream per call: N mask uniforms, one conditional draw per included
    particle (in particle order), then the acceptance uniform.
    """
    rng = rng_from_seed(seed)
    probs = np.minimum(1.0, alpha * cohort.weights)
    idx = np.flatnonzero(rng.random(cohort.size) < probs)
    proposals = (sample_conditional_batch(model, [cohort.records[i] for i in idx], rng)
                 if idx.size else np.zeros(0))
    u = float(rng.random())
    return idx, np.asarray(proposals, dtype=float), u


def mh_step(ensemble, lam: LambdaState, cohort, model, alpha: float, seed, *, ctx=None):
    """One Metropolis-Hastings block update; returns (ensemble, accepted).

    The whole proposed block is accepted or rejected with a single uniform;
    the acceptance exponent is the tilt difference alone (the conditional
    reference density cancels against the proposal and is never evaluated).
    """
    if ctx is None:
        ctx = _TargetContext(cohort, lam.targets)
    idx, proposals, u = propose_block(cohort, model, alpha, seed)
    ensemble.proposals_drawn += int(idx.size)
    if idx.size == 0:
        ensemble.ghat = ctx.ghat(ctx.eval_rows(ensemble.outcomes))
        return ensemble, True
    f_new = ctx.eval_rows(proposals, idx)
    f_old = ctx.eval_rows(ensemble.outcomes[idx], idx)
    delta = float(lam.values @ (f_new - f_old).sum(axis=1)) if lam.values.size else 0.0
    accepted = delta >= 0 or u < math.exp(delta)
    if accepted:
        ensemble.outcomes[idx] = proposals
    ensemble.ghat = ctx.ghat(ctx.eval_rows(ensemble.outcomes))
    return ensemble, accepted


def rm_update(lam: LambdaState, ensemble: EnsembleState, targets, schedule: StepSchedule) -> LambdaState:
    """One clipped Robbins-Monro step toward the dual stationarity point."""
    targets = tuple(targets)
    t = lam.t + 1
    gamma = schedule.at(t)
    ghat = ensemble.ghat
    values = lam.values.copy()
    for j, c in enumerate(targets):
        drift = c.target - ghat[j]
        if c.mode == "soft":
            drift -= values[j] / c.penalty
        values[j] += float(np.clip(gamma * drift, -schedule.clip, schedule.clip))
    return LambdaState(values=values, targets=targets, t=t)


def estimate_constraints(ensemble, cohort, targets) -> np.ndarray:
    """Weighted constraint estimates; subgroup targets renormalize within."""
    ctx = _TargetContext(cohort, targets)
    return ctx.ghat(ctx.eval_rows(ensemble.outcomes))


def gelman_rubin(traces: np.ndarray) -> float:
    """Split-free multi-chain R-hat on (chains, points) traces.

    Zero within- and between-variance (constant identical traces) is defined
    as 1; zero within- with positive between-variance diverges to inf.
    """
    chains, n = traces.shape
    if chains < 2 or n < 2:
        return math.nan
    means = traces.mean(axis=1)
    w = float(traces.var(axis=1, ddof=1).mean())
    b_over_n = float(means.var(ddof=1))
    if w == 0.0:
        return 1.0 if b_over_n == 0.0 else math.inf
    var_plus = (n - 1) / n * w + b_over_n
    return math.sqrt(var_plus / w)


def weighted_quantile(y: np.ndarray, w: np.ndarray, p: float) -> float:
    order = np.argsort(y)
    cw = np.cumsum(w[order])
    k = int(np.searchsorted(cw, p * cw[-1], side="left"))
    return float(y[order][min(k, len(y) - 1)])


def landmark_deviations_days(ensemble, cohort, targets, ctx=None) -> np.ndarray:
    """Per-target |achieved quantile time - threshold| for quantile targets.

    The achieved time is where the weighted outcome distribution reaches the
    target percentile, i.e. the horizontal gap between the achieved and the
    published curve at that landmark. NaN for non-quantile targets.
    """
    if ctx is None:
        ctx = _TargetContext(cohort, targets)
    out = np.full(len(ctx.targets), math.nan)
    y, w = ensemble.outcomes, cohort.weights
    for j, c in enumerate(ctx.targets):
        fn = ctx._inner(c.statistic)
        if not isinstance(fn, (ExactQuantile, SigmoidQuantile)):
            continue
        mask = ctx.masks[j]
        yy, ww = (y, w) if mask is None else (y[mask], w[mask])
        if len(yy) == 0 or not 0.0 < c.target < 1.0:
            continue
        out[j] = abs(weighted_quantile(yy, ww, c.target) - fn.threshold)
    return out


def aggregate_hard_residual(lam: LambdaState, deviations_days, ghat, aggregator="sum") -> float:
    """Stopping-rule residual over the hard block.

    Quantile-typed targets contribute their deviation in days; any other
    target contributes |ghat - c| x 1000 (probability scale).
    """
    terms = []
    for j, c in enumerate(lam.targets):
        if c.mode != "hard":
            continue
        d = deviations_days[j]
        terms.append(abs(d) if not math.isnan(d) else abs(ghat[j] - c.target) * 1000.0)
    if not terms:
        return 0.0
    return float(sum(terms) if aggregator == "sum" else max(terms))


def compute_diagnostics(partition_history, window: int | None = None, *, min_points: int = 10,
                        labels=()) -> ChainDiagnostics:
    """R-hat per constraint from per-partition estimate traces.

    `partition_history` is (points, partitions, J). Returns a not-ready
    object when fewer than `min_points` recorded points (or < 2 partitions)
    are available.
    """
    hist = np.asarray(partition_history, dtype=float)
    if hist.ndim != 3 or hist.shape[0] < min_points or hist.shape[1] < 2:
        return ChainDiagnostics(ready=False, labels=tuple(labels))
    if window is not None:
        hist = hist[-window:]
    j = hist.shape[2]
    rhat = np.array([gelman_rubin(hist[:, :, k].T) for k in range(j)]) if j else np.zeros(0)
    return ChainDiagnostics(ready=True, rhat=rhat,
                            max_rhat=float(np.max(rhat)) if j else math.nan,
                            labels=tuple(labels))


def run_chain(cohort, model, targets, settings: SamplerSettings, seed, *,
              warm_start=None):
    """Run Stage 2 end to end: adapt multipliers, then record thinned chains.

    Burn-in is adaptive by default: recording starts once the stopping rule
    (all R-hat below threshold, soft block within tolerance, aggregate hard
    residual below theta) first holds, and the run ends when every particle
    has `chain_depth` recorded samples. Hitting `t_max` first returns the
    chains flagged as non-converged.

    `warm_start` is an optional (outcomes, lambda_values) pair, used by the
    bootstrap fan-out to resume from a reference run's tail.
    """
    settings.validate()
    targets = tuple(targets)
    ctx = _TargetContext(cohort, targets)
    n = cohort.size

    if warm_start is None:
        ensemble = init_ensemble(cohort, model, seed, settings.chain_depth)
        lam = init_lambda(targets)
    else:
        y0, lam0 = warm_start
        ensemble = EnsembleState(outcomes=np.array(y0, dtype=float),
                                 buffer=np.zeros((n, settings.chain_depth)))
        lam = LambdaState(values=np.array(lam0, dtype=float), targets=targets, t=0)

    fmat = ctx.eval_rows(ensemble.outcomes)
    ensemble.ghat = ctx.ghat(fmat)

    peff = min(settings.partitions, n)
    part_of = np.arange(n) % peff
    # per-partition denominators (subgroup-aware); zero-weight cells excluded from R-hat
    part_denoms = []
    for j in range(len(targets)):
        wj = cohort.weights if ctx.masks[j] is None else cohort.weights * ctx.masks[j]
        part_denoms.append(np.bincount(part_of, weights=wj, minlength=peff))

    accepts = deque(maxlen=settings.accept_window)
    hist = deque(maxlen=max(settings.rhat_window, settings.min_diag_points))
    acc_rates = []
    trace_iters, lam_trace = [], []
    burn_iteration = None
    converged = False
    stream_key = (seed, _STEP_STREAM) if np.isscalar(seed) else tuple(seed) + (_STEP_STREAM,)

    def partition_ghat():
        rows = []
        for j in range(len(targets)):
            wj = cohort.weights if ctx.masks[j] is None else cohort.weights * ctx.masks[j]
            num = np.bincount(part_of, weights=wj * fmat[j], minlength=peff)
            with np.errstate(invalid="ignore", divide="ignore"):
                rows.append(np.where(part_denoms[j] > 0, num / part_denoms[j], np.nan))
        return np.array(rows).T  # (P, J)

    def stopping_state():
        diag = _rhat_from_history(hist, settings, len(targets))
        if diag is None:
            return False, None, None, None
        rhat = diag
        soft = lam.soft_violations(ensemble.ghat)
        devs = landmark_deviations_days(ensemble, cohort, targets, ctx)
        agg = aggregate_hard_residual(lam, devs, ensemble.ghat, settings.residual_aggregator)
        ok_rhat = bool(np.all(rhat[np.isfinite(rhat)] < settings.rhat_threshold)) and not np.any(np.isinf(rhat))
        ok_soft = soft.size == 0 or float(soft.max()) < settings.soft_tolerance
        ok_hard = agg < settings.theta
        return ok_rhat and ok_soft and ok_hard, rhat, soft, devs

    t = 0
    for t in range(1, settings.t_max + 1):
        idx, proposals, u = propose_block(cohort, model,
                                          settings.proposal_rate, stream_key + (t,))
        ensemble.proposals_drawn += int(idx.size)
        if idx.size:
            f_new = ctx.eval_rows(proposals, idx)
            delta = float(lam.values @ (f_new - fmat[:, idx]).sum(axis=1)) if lam.values.size else 0.0
            accepted = delta >= 0 or u < math.exp(delta)
            if accepted:
                ensemble.outcomes[idx] = proposals
                fmat[:, idx] = f_new
        else:
            accepted = True
        accepts.append(accepted)
        ensemble.ghat = ctx.ghat(fmat)
        lam = rm_update(lam, ensemble, targets, settings.schedule)

        if t % settings.diag_stride == 0:
            hist.append(partition_ghat())
            acc_rates.append(float(np.mean(accepts)))
            trace_iters.append(t)
            lam_trace.append(lam.values.copy())
            if burn_iteration is None and settings.burn_in is None:
                ok, *_ = stopping_state()
                if ok:
                    burn_iteration = t
        if burn_iteration is None and settings.burn_in is not None and t >= settings.burn_in:
            burn_iteration = t
        if burn_iteration is not None and t > burn_iteration \
                and (t - burn_iteration) % settings.spacing == 0:
            ensemble.record()
            if ensemble.full:
                converged = True
                break

    ok, rhat, soft, devs = stopping_state()
    if rhat is None:
        rhat = np.full(len(targets), math.nan)
        soft = lam.soft_violations(ensemble.ghat)
        devs = landmark_deviations_days(ensemble, cohort, targets, ctx)
    agg = aggregate_hard_residual(lam, devs, ensemble.ghat, settings.residual_aggregator)
    diagnostics = ChainDiagnostics(
        ready=True,
        acceptance_rate=float(np.mean(accepts)) if accepts else math.nan,
        acceptance_min=float(np.min(acc_rates)) if acc_rates else math.nan,
        acceptance_max=float(np.max(acc_rates)) if acc_rates else math.nan,
        rhat=rhat, max_rhat=float(np.nanmax(rhat)) if rhat.size else math.nan,
        max_soft_violation=float(soft.max()) if soft.size else math.nan,
        max_landmark_deviation_days=float(np.nanmax(devs)) if np.any(np.isfinite(devs)) else math.nan,
        aggregate_hard_residual=agg,
        stopping_iteration=burn_iteration,
        total_iterations=t,
        converged=converged and (burn_iteration is not None),
        proposals_drawn=ensemble.proposals_drawn,
        labels=tuple(c.name for c in targets),
        lambda_min=float(lam.values.min()) if lam.values.size else math.nan,
        lambda_max=float(lam.values.max()) if lam.values.size else math.nan,
        trace_iterations=np.array(trace_iters, dtype=int),
        lambda_trace=np.array(lam_trace) if lam_trace else np.zeros((0, len(targets))),
    )
    return ensemble, lam, diagnostics


def _rhat_from_history(hist, settings, j):
    if len(hist) < settings.min_diag_points:
        return None
    arr = np.array(list(hist)[-settings.rhat_window:])  # (points, P, J)
    if j == 0:
        return np.zeros(0)
    out = np.empty(j)
    for k in range(j):
        traces = arr[:, :, k].T  # (P, points)
        valid = ~np.any(np.isnan(traces), axis=1)
        out[k] = gelman_rubin(traces[valid]) if valid.sum() >= 2 else math.nan
    return out
