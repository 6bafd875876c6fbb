"""End-to-end orchestration: per-source calibration, cross-source rebalance,
contrast readouts, and the bootstrap fan-out with percentile envelopes."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .balance import Cohort, DualState, filter_eligible, solve_entropy_balance
from .errors import AggcalError, StageError
from .model import sample_baseline
from .reconstruct import PseudoIPD, bootstrap_ipd, recompute_targets
from .sampler import SamplerSettings, run_chain
from .survival import curve_landmark, curve_quantile, rmst, weighted_cox_hr, weighted_km

_BASELINE_STREAM = 11
_STAGE2_STREAM = 13
_FANOUT_STREAM = 17


@dataclass(frozen=True)
class RecodeMap:
    """Value-level lookup applied to one covariate before any other step."""

    feature: str
    mapping: dict
    new_feature: str | None = None  # None: replace values in place


@dataclass(frozen=True)
class TrialSpec:
    """Everything one aggregate source supplies: eligibility, baseline
    targets, outcome targets, and covariate recodes."""

    name: str
    eligibility: object
    baseline_constraints: tuple = ()
    outcome_constraints: tuple = ()
    recodes: tuple = ()


def apply_recodes(records, recodes) -> list:
    if not recodes:
        return list(records)
    out = []
    for x in records:
        xr = dict(x)
        for rc in recodes:
            v = xr.get(rc.feature)
            new = None if v is None else rc.mapping.get(v, v)
            xr[rc.new_feature or rc.feature] = new
        out.append(xr)
    return out


@dataclass
class PipelineSettings:
    """Desk-level knobs for a full calibration run."""

    n_baseline: int = 20_000
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    rmst_horizons: tuple = (365.0, 731.0)
    report_landmarks: tuple = (365.0, 731.0)
    b_source: int = 20
    b_target: int = 20
    drop_policy: str = "drop_constraint"  # or "drop_replicate"

    def validate(self):
        if self.n_baseline < 1:
            raise ValueError("n_baseline must be positive")
        if self.b_source < 1 or self.b_target < 1:
            raise ValueError("bootstrap replicate counts must be >= 1")
        if self.drop_policy not in ("drop_constraint", "drop_replicate"):
            raise ValueError("unknown drop policy")
        self.sampler.validate()
        return self


@dataclass
class CalibratedArm:
    """One trial-calibrated cohort: weights, outcome chains, diagnostics."""

    name: str
    cohort: Cohort
    stage1: DualState
    ensemble: object
    lam: object
    diagnostics: object
    targets: tuple

    @property
    def chains(self) -> np.ndarray:
        return self.ensemble.buffer


def calibrate_arm(model, spec: TrialSpec, settings: PipelineSettings, seed) -> CalibratedArm:
    """Run both calibration stages against one trial spec."""
    settings.validate()
    try:
        draws = sample_baseline(model, settings.n_baseline, (seed, _BASELINE_STREAM))
        records = apply_recodes(draws, spec.recodes)
        cohort = filter_eligible(records, spec.eligibility)
    except AggcalError as e:
        raise StageError("eligibility", e) from e
    try:
        cohort, dual = solve_entropy_balance(cohort, spec.baseline_constraints)
    except AggcalError as e:
        raise StageError("stage1-balance", e) from e
    try:
        ensemble, lam, diag = run_chain(cohort, model, spec.outcome_constraints,
                                        settings.sampler, (seed, _STAGE2_STREAM))
    except AggcalError as e:
        raise StageError("stage2-sampler", e) from e
    return CalibratedArm(name=spec.name, cohort=cohort, stage1=dual,
                         ensemble=ensemble, lam=lam, diagnostics=diag,
                         targets=tuple(spec.outcome_constraints))


def second_pass_eb(arm: CalibratedArm, target_baseline):
    """Rebalance an arm's weights onto another population's baseline targets.

    The arm's existing weights are the reference measure, so the projection
    moves them as little as the new targets allow.
    """
    rebal, dual = solve_entropy_balance(arm.cohort, target_baseline)
    return rebal.weights, dual


def pooled_outcomes(arm: CalibratedArm, weights=None):
    """Flatten the chain buffer into (times, events, weights) rows.

    Each particle contributes its chain samples with weight w_i / depth;
    buffers must be full so every particle carries equal replication.
    """
    ens = arm.ensemble
    depth = ens.buffer.shape[1]
    if not ens.full:
        raise ValueError(f"chain buffers not full ({ens.buffer_fill}/{depth}); "
                         "run the chain to completion before readout")
    w = arm.cohort.weights if weights is None else np.asarray(weights, dtype=float)
    times = ens.buffer.ravel()
    wrep = np.repeat(w / depth, depth)
    events = np.ones_like(times, dtype=bool)
    return times, events, wrep


def _arm_summary(times, events, weights, horizons, landmarks):
    curve = weighted_km(times, events, weights)
    return {
        "median": curve_quantile(curve, 0.5),
        "landmarks": {float(t): curve_landmark(curve, t) for t in landmarks},
        "rmst": {float(tau): rmst(curve, tau) for tau in horizons},
    }, curve


@dataclass
class ContrastReport:
    """Cross-trial readouts; envelope fields are filled by the fan-out."""

    arm_a: str
    arm_b: str
    arms: dict  # label -> {"median": ..., "landmarks": {...}, "rmst": {...}}
    delta_rmst: dict  # tau -> days
    hazard_ratio: float
    hr_se_model: float
    hr_se_robust: float
    hr_ci: tuple | None = None
    envelopes: dict | None = None  # statistic key -> (lo, hi)
    b_source: int = 1
    b_target: int = 1
    n_pairs: int = 1
    positive_fraction: dict | None = None  # tau -> fraction of pairs with delta > 0
    hr_significant_fraction: float | None = None
    excluded_replicates: int = 0
    dropped_constraints: dict | None = None

    def to_dict(self) -> dict:
        def _num(v):
            return None if v is None else float(v)

        return {
            "arm_a": self.arm_a,
            "arm_b": self.arm_b,
            "arms": {
                label: {
                    "median": _num(s["median"]),
                    "landmarks": {str(k): _num(v) for k, v in s["landmarks"].items()},
                    "rmst": {str(k): _num(v) for k, v in s["rmst"].items()},
                }
                for label, s in self.arms.items()
            },
            "delta_rmst": {str(k): _num(v) for k, v in self.delta_rmst.items()},
            "hazard_ratio": _num(self.hazard_ratio),
            "hr_se_model": _num(self.hr_se_model),
            "hr_se_robust": _num(self.hr_se_robust),
            "hr_ci": None if self.hr_ci is None else [_num(self.hr_ci[0]), _num(self.hr_ci[1])],
            "envelopes": None if self.envelopes is None else {
                k: [_num(v[0]), _num(v[1])] for k, v in self.envelopes.items()},
            "b_source": self.b_source,
            "b_target": self.b_target,
            "n_pairs": self.n_pairs,
            "positive_fraction": None if self.positive_fraction is None else {
                str(k): _num(v) for k, v in self.positive_fraction.items()},
            "hr_significant_fraction": _num(self.hr_significant_fraction)
            if self.hr_significant_fraction is not None else None,
            "excluded_replicates": self.excluded_replicates,
            "dropped_constraints": self.dropped_constraints,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastReport":
        return cls(
            arm_a=d["arm_a"], arm_b=d["arm_b"],
            arms={
                label: {
                    "median": s["median"],
                    "landmarks": {float(k): v for k, v in s["landmarks"].items()},
                    "rmst": {float(k): v for k, v in s["rmst"].items()},
                }
                for label, s in d["arms"].items()
            },
            delta_rmst={float(k): v for k, v in d["delta_rmst"].items()},
            hazard_ratio=d["hazard_ratio"], hr_se_model=d["hr_se_model"],
            hr_se_robust=d["hr_se_robust"],
            hr_ci=None if d.get("hr_ci") is None else tuple(d["hr_ci"]),
            envelopes=None if d.get("envelopes") is None else {
                k: tuple(v) for k, v in d["envelopes"].items()},
            b_source=d.get("b_source", 1), b_target=d.get("b_target", 1),
            n_pairs=d.get("n_pairs", 1),
            positive_fraction=None if d.get("positive_fraction") is None else {
                float(k): v for k, v in d["positive_fraction"].items()},
            hr_significant_fraction=d.get("hr_significant_fraction"),
            excluded_replicates=d.get("excluded_replicates", 0),
            dropped_constraints=d.get("dropped_constraints"),
        )


def cross_trial_contrast(arm_a: CalibratedArm, arm_b: CalibratedArm, weights_b=None,
                         settings: PipelineSettings | None = None) -> ContrastReport:
    """Weighted survival contrast of arm A against (possibly rebalanced) arm B."""
    settings = settings or PipelineSettings()
    label_a = arm_a.name
    label_b = arm_b.name if arm_b.name != arm_a.name else f"{arm_b.name} (b)"
    ta, ea, wa = pooled_outcomes(arm_a)
    tb, eb, wb = pooled_outcomes(arm_b, weights_b)
    sa, _ = _arm_summary(ta, ea, wa, settings.rmst_horizons, settings.report_landmarks)
    sb, _ = _arm_summary(tb, eb, wb, settings.rmst_horizons, settings.report_landmarks)
    cox = weighted_cox_hr(ta, ea, wa, tb, eb, wb)
    half = 1.959963984540054 * cox.se_robust
    return ContrastReport(
        arm_a=label_a, arm_b=label_b,
        arms={label_a: sa, label_b: sb},
        delta_rmst={tau: sa["rmst"][tau] - sb["rmst"][tau] for tau in sa["rmst"]},
        hazard_ratio=cox.hazard_ratio, hr_se_model=cox.se_model,
        hr_se_robust=cox.se_robust,
        hr_ci=(float(np.exp(cox.log_hr - half)), float(np.exp(cox.log_hr + half))),
    )


def _replicate_ensembles(arm: CalibratedArm, model, ipd: PseudoIPD, b: int,
                         settings: PipelineSettings, seed):
    """Warm-started chain per bootstrap replicate of the arm's targets."""
    salt = zlib.crc32(arm.name.encode())
    reps = bootstrap_ipd(ipd, b, (seed, _FANOUT_STREAM, salt))
    out, dropped, excluded = [], {}, 0
    tail = arm.ensemble.buffer[:, -1]
    for r, rep in enumerate(reps):
        pt = recompute_targets(rep, arm.targets, replicate_index=r, seed=(seed, salt, r))
        if pt.dropped:
            if settings.drop_policy == "drop_replicate":
                excluded += 1
                continue
            dropped[r] = list(pt.dropped)
        ens, _, diag = run_chain(
            arm.cohort, model, pt.targets, settings.sampler, (seed, _FANOUT_STREAM, salt, r),
            warm_start=(tail, _warm_lambda(arm, pt.targets)))
        if not diag.converged:
            excluded += 1
            continue
        out.append(ens)
    return out, dropped, excluded


def _warm_lambda(arm: CalibratedArm, targets):
    by_label = {c.label: v for c, v in zip(arm.targets, arm.lam.values)}
    return np.array([by_label.get(c.label, 0.0) for c in targets])


def bootstrap_fanout(arm_a: CalibratedArm, model_a, ipd_a: PseudoIPD,
                     arm_b: CalibratedArm, model_b, ipd_b: PseudoIPD,
                     rebalance_targets, settings: PipelineSettings, seed) -> ContrastReport:
    """Propagate published-curve uncertainty through the whole contrast.

    Both arms' outcome targets are re-read from bootstrap replicates of
    their pseudo patient-level data; each replicate re-runs the calibration
    chain warm-started from the reference run (cohort weights unchanged);
    the contrast is evaluated over the full Cartesian product of replicate
    pairs and reported as a pointwise percentile envelope around the
    reference point estimate. Arm B is rebalanced onto `rebalance_targets`
    (computed once: baseline targets are not perturbed by the outcome
    bootstrap).
    """
    settings.validate()
    w_b_prime, _ = second_pass_eb(arm_b, rebalance_targets)
    point = cross_trial_contrast(arm_a, arm_b, weights_b=w_b_prime, settings=settings)

    ens_a, drop_a, exc_a = _replicate_ensembles(arm_a, model_a, ipd_a,
                                                settings.b_source, settings, seed)
    ens_b, drop_b, exc_b = _replicate_ensembles(arm_b, model_b, ipd_b,
                                                settings.b_target, settings, seed)
    if not ens_a or not ens_b:
        raise StageError("bootstrap-fanout", AggcalError("no converged replicates"))

    depth = arm_a.ensemble.buffer.shape[1]
    wa = np.repeat(arm_a.cohort.weights / depth, depth)
    depth_b = arm_b.ensemble.buffer.shape[1]
    wb = np.repeat(w_b_prime / depth_b, depth_b)
    horizons = tuple(float(t) for t in settings.rmst_horizons)
    landmarks = tuple(float(t) for t in settings.report_landmarks)

    def summarize(ens_list, weights):
        stats = []
        for ens in ens_list:
            times = ens.buffer.ravel()
            events = np.ones_like(times, dtype=bool)
            s, _ = _arm_summary(times, events, weights, horizons, landmarks)
            stats.append((s, times, events))
        return stats

    stats_a = summarize(ens_a, wa)
    stats_b = summarize(ens_b, wb)

    delta_pairs = {tau: [] for tau in horizons}
    hr_pairs, hr_sig = [], []
    for sa, ta_r, ea_r in stats_a:
        for sb, tb_r, eb_r in stats_b:
            for tau in horizons:
                delta_pairs[tau].append(sa["rmst"][tau] - sb["rmst"][tau])
            cox = weighted_cox_hr(ta_r, ea_r, wa, tb_r, eb_r, wb)
            hr_pairs.append(cox.hazard_ratio)
            upper = cox.log_hr + 1.959963984540054 * cox.se_robust
            hr_sig.append(cox.hazard_ratio < 1.0 and upper < 0.0)

    env = {}
    for tau in horizons:
        arr = np.array(delta_pairs[tau])
        env[f"delta_rmst:{tau:g}"] = (float(np.quantile(arr, 0.025)),
                                      float(np.quantile(arr, 0.975)))
    hr_arr = np.array(hr_pairs)
    env["hr"] = (float(np.quantile(hr_arr, 0.025)), float(np.quantile(hr_arr, 0.975)))
    for label, stats in ((point.arm_a, stats_a), (point.arm_b, stats_b)):
        med = np.array([s["median"] if s["median"] is not None else np.nan
                        for s, _, _ in stats])
        med = med[~np.isnan(med)]
        if med.size:
            env[f"median:{label}"] = (float(np.quantile(med, 0.025)),
                                      float(np.quantile(med, 0.975)))
        for t in landmarks:
            vals = np.array([s["landmarks"][t] for s, _, _ in stats])
            env[f"landmark:{label}:{t:g}"] = (float(np.quantile(vals, 0.025)),
                                              float(np.quantile(vals, 0.975)))

    point.envelopes = env
    point.hr_ci = env["hr"]
    point.b_source = len(ens_a)
    point.b_target = len(ens_b)
    point.n_pairs = len(ens_a) * len(ens_b)
    point.positive_fraction = {
        tau: float(np.mean(np.array(delta_pairs[tau]) > 0)) for tau in horizons}
    point.hr_significant_fraction = float(np.mean(hr_sig))
    point.excluded_replicates = exc_a + exc_b
    point.dropped_constraints = {"arm_a": drop_a, "arm_b": drop_b} if (drop_a or drop_b) else None
    return point
