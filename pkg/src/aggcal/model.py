"""Generative-model interface and built-in simulators.

The calibration pipeline treats the joint model of (baseline record, outcome)
as a black box reachable through three interfaces: a baseline sampler, a
conditional outcome sampler, and (optionally) conditional density evaluation.
Density evaluation is only ever used by verification oracles; the calibration
path never touches it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedCapabilityError

# A baseline record maps feature name -> value; None is the explicit
# missing marker (never a sentinel number).
Record = dict


def rng_from_seed(seed) -> np.random.Generator:
    """Build a Generator from an int seed or a tuple of ints (stream key)."""
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Feature:
    """One covariate descriptor: continuous (with units) or categorical."""

    name: str
    kind: str  # "continuous" | "categorical"
    units: str | None = None
    levels: tuple = ()
    nullable: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "categorical" and len(self.levels) == 0:
            raise ValueError(f"categorical feature {self.name!r} has an empty level set")


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered feature list; names unique."""

    features: tuple

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names in schema")

    @property
    def names(self):
        return tuple(f.name for f in self.features)

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def validate_record(self, x: Record) -> None:
        """Raise ValueError unless `x` conforms to this schema."""
        for f in self.features:
            if f.name not in x:
                raise ValueError(f"record lacks feature {f.name!r}")
            v = x[f.name]
            if v is None:
                if not f.nullable:
                    raise ValueError(f"feature {f.name!r} is not nullable")
                continue
            if f.kind == "continuous":
                if not math.isfinite(float(v)):
                    raise ValueError(f"non-finite value for {f.name!r}")
            else:
                if v not in f.levels:
                    raise ValueError(f"value {v!r} not a level of {f.name!r}")


class GenerativeModel:
    """Base interface: capability flags plus raw sampling/density hooks.

    Sampling capabilities are always advertised; density evaluation may be
    absent (oracle tests skip gracefully in that case).
    """

    can_sample_baseline = True
    can_sample_conditional = True
    can_eval_conditional_density = False

    schema: CovariateSchema

    def _sample_baseline(self, n: int, rng: np.random.Generator) -> list:
        raise NotImplementedError

    def _sample_conditional_batch(self, xs, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _conditional_density(self, x: Record, y: float) -> float:
        raise NotImplementedError


def sample_baseline(model: GenerativeModel, n: int, seed) -> list:
    """Draw n i.i.d. baseline records; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not model.can_sample_baseline:
        raise UnsupportedCapabilityError("model cannot sample baselines")
    return model._sample_baseline(int(n), rng_from_seed(seed))


def sample_conditional(model: GenerativeModel, x: Record, seed) -> float:
    """Draw one outcome from the conditional law at `x`."""
    if not model.can_sample_conditional:
        raise UnsupportedCapabilityError("model cannot sample conditionally")
    model.schema.validate_record(x)
    return float(model._sample_conditional_batch([x], rng_from_seed(seed))[0])


def sample_conditional_batch(model: GenerativeModel, xs, rng: np.random.Generator) -> np.ndarray:
    """Vectorized conditional draws, one per record, in record order."""
    if not model.can_sample_conditional:
        raise UnsupportedCapabilityError("model cannot sample conditionally")
    return model._sample_conditional_batch(xs, rng)


def eval_conditional_density(model: GenerativeModel, x: Record, y: float) -> float:
    """Conditional density (or pmf) at y; requires the density capability."""
    if not model.can_eval_conditional_density:
        raise UnsupportedCapabilityError("model does not evaluate conditional densities")
    return float(model._conditional_density(x, y))


@dataclass(frozen=True)
class ContinuousMarginal:
    """Truncated-normal sampler parameters for one continuous feature."""

    mean: float
    sd: float
    lower: float = -math.inf
    upper: float = math.inf


@dataclass
class SyntheticSurvivalModel(GenerativeModel):
    """Built-in simulator: independent baseline marginals + Weibull AFT outcomes.

    Baselines: categorical features from marginal tables, continuous features
    from truncated normals, optional per-feature missingness. Outcomes: a
    Weibull accelerated-failure-time law whose log scale is a linear predictor
    on the covariates; a missing feature contributes zero.

    The conditional draw consumes exactly one uniform per record (inverse
    CDF), which keeps per-particle streams aligned across implementations.
    """

    schema: CovariateSchema
    categorical_marginals: dict  # name -> {level: prob}
    continuous_marginals: dict  # name -> ContinuousMarginal
    missing_rates: dict  # name -> prob of a missing value
    shape: float  # Weibull shape, > 0
    log_scale_intercept: float
    # name -> {"coef": float, "center": float} for continuous features,
    # name -> {level: coef} for categorical features
    coefficients: dict = field(default_factory=dict)
    density_enabled: bool = True

    def __post_init__(self):
        if not self.shape > 0:
            raise ValueError("Weibull shape must be positive")
        for name, table in self.categorical_marginals.items():
            total = sum(table.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"marginal for {name!r} sums to {total}, not 1")
        for name in self.missing_rates:
            if not self.schema.feature(name).nullable:
                raise ValueError(f"missing rate on non-nullable feature {name!r}")

    @property
    def can_eval_conditional_density(self):  # type: ignore[override]
        return self.density_enabled

    # -- baseline sampler ---------------------------------------------------

    def _sample_baseline(self, n, rng):
        columns = {}
        for f in self.schema.features:
            if f.kind == "categorical":
                table = self.categorical_marginals[f.name]
                levels = list(table.keys())
                probs = np.array([table[l] for l in levels], dtype=float)
                idx = rng.choice(len(levels), size=n, p=probs / probs.sum())
                col = [levels[i] for i in idx]
            else:
                m = self.continuous_marginals[f.name]
                # rejection-free truncation via inverse CDF of the normal
                from scipy.stats import norm

                lo = norm.cdf(m.lower, m.mean, m.sd)
                hi = norm.cdf(m.upper, m.mean, m.sd)
                u = rng.random(n)
                col = norm.ppf(lo + u * (hi - lo), m.mean, m.sd).tolist()
            rate = self.missing_rates.get(f.name, 0.0)
            if rate > 0:
                miss = rng.random(n) < rate
                col = [None if miss[i] else col[i] for i in range(n)]
            columns[f.name] = col
        return [{name: columns[name][i] for name in self.schema.names} for i in range(n)]

    # -- conditional AFT law ------------------------------------------------

    def conditional_scale(self, x: Record) -> float:
        """exp(linear predictor) at x; missing features contribute zero."""
        lp = self.log_scale_intercept
        for name, spec in self.coefficients.items():
            v = x.get(name)
            if v is None:
                continue
            if self.schema.feature(name).kind == "continuous":
                lp += spec["coef"] * (float(v) - spec.get("center", 0.0))
            else:
                lp += spec.get(v, 0.0)
        return math.exp(lp)

    def _sample_conditional_batch(self, xs, rng):
        scales = np.array([self.conditional_scale(x) for x in xs])
        u = rng.random(len(scales))
        # inverse Weibull CDF: F(y) = 1 - exp(-(y/scale)^k)
        return scales * (-np.log1p(-u)) ** (1.0 / self.shape)

    def _conditional_density(self, x, y):
        if y < 0:
            return 0.0
        k = self.shape
        s = self.conditional_scale(x)
        z = y / s
        if y == 0.0:
            return k / s if k == 1.0 else (math.inf if k < 1.0 else 0.0)
        return (k / s) * z ** (k - 1.0) * math.exp(-(z**k))

    def conditional_cdf(self, x: Record, y) -> np.ndarray:
        s = self.conditional_scale(x)
        y = np.asarray(y, dtype=float)
        return np.where(y < 0, 0.0, -np.expm1(-((np.maximum(y, 0.0) / s) ** self.shape)))


@dataclass
class DiscreteOutcomeModel(GenerativeModel):
    """Finite-support model for exact verification: enumerable conditional laws.

    Baseline support is a fixed list of records; the conditional pmf over a
    shared outcome grid is given per support row. The record's `key_feature`
    value indexes the pmf row.
    """

    schema: CovariateSchema
    baseline_records: list
    baseline_probs: np.ndarray
    outcome_support: np.ndarray  # (m,) outcome values in days
    outcome_probs: np.ndarray  # (len(baseline_records), m), rows sum to 1
    key_feature: str = "stratum"
    density_enabled: bool = True

    def __post_init__(self):
        self.baseline_probs = np.asarray(self.baseline_probs, dtype=float)
        self.outcome_support = np.asarray(self.outcome_support, dtype=float)
        self.outcome_probs = np.asarray(self.outcome_probs, dtype=float)
        if not np.allclose(self.outcome_probs.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("conditional pmf rows must sum to 1")

    @property
    def can_eval_conditional_density(self):  # type: ignore[override]
        return self.density_enabled

    def _row(self, x):
        return int(x[self.key_feature])

    def _sample_baseline(self, n, rng):
        idx = rng.choice(len(self.baseline_records), size=n, p=self.baseline_probs)
        return [dict(self.baseline_records[i]) for i in idx]

    def _sample_conditional_batch(self, xs, rng):
        u = rng.random(len(xs))
        out = np.empty(len(xs))
        for i, x in enumerate(xs):
            cdf = np.cumsum(self.outcome_probs[self._row(x)])
            out[i] = self.outcome_support[np.searchsorted(cdf, u[i], side="right")]
        return out

    def _conditional_density(self, x, y):
        row = self.outcome_probs[self._row(x)]
        hits = np.isclose(self.outcome_support, y, rtol=0.0, atol=1e-9)
        return float(row[hits].sum())


class RestrictedModel(GenerativeModel):
    """Wrapper that hides chosen capabilities of an inner model."""

    def __init__(self, inner: GenerativeModel, *, baseline=True, conditional=True, density=False):
        self._inner = inner
        self.schema = inner.schema
        self.can_sample_baseline = baseline
        self.can_sample_conditional = conditional
        self.can_eval_conditional_density = density

    def _sample_baseline(self, n, rng):
        return self._inner._sample_baseline(n, rng)

    def _sample_conditional_batch(self, xs, rng):
        return self._inner._sample_conditional_batch(xs, rng)

    def _conditional_density(self, x, y):
        return self._inner._conditional_density(x, y)
