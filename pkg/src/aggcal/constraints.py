"""Representable statistics, constraint specifications, and eligibility rules.

Every calibration target must be the expectation of some function of a
baseline record or an outcome. The variants here cover the cases published
trial reports actually use: raw moments, proportions (indicators on one
covariate), quantile targets in exact and sigmoid-smoothed form, a
missingness indicator, and subgroup-scoped versions of outcome statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

from .errors import DegenerateTargetError, MissingValueError

# Exponent clamp for the sigmoid: beyond +/-40 the result is 0/1 to machine
# precision, and exp() cannot overflow.
SIGMOID_CLAMP = 40.0

_TRANSFORMS = {
    None: lambda v: v,
    "identity": lambda v: v,
    "square": lambda v: v * v,
    "log": math.log,
}


@dataclass(frozen=True)
class Predicate:
    """Comparison or set-membership test on one covariate."""

    feature: str
    op: str  # "<=", ">=", "<", ">", "==", "!=", "in", "notnull"
    value: object = None

    def holds(self, x) -> Optional[bool]:
        """True/False, or None when the tested covariate is missing."""
        v = x.get(self.feature)
        if self.op == "notnull":
            return v is not None
        if v is None:
            return None
        if self.op == "<=":
            return float(v) <= float(self.value)
        if self.op == ">=":
            return float(v) >= float(self.value)
        if self.op == "<":
            return float(v) < float(self.value)
        if self.op == ">":
            return float(v) > float(self.value)
        if self.op == "==":
            return v == self.value
        if self.op == "!=":
            return v != self.value
        if self.op == "in":
            return v in self.value
        raise ValueError(f"unknown predicate op {self.op!r}")


@dataclass(frozen=True)
class Moment:
    """Raw (optionally transformed) value of one continuous covariate."""

    feature: str
    transform: str | None = None


@dataclass(frozen=True)
class Indicator:
    """0/1 statistic of a baseline record: proportion-style targets."""

    predicate: Predicate


@dataclass(frozen=True)
class MissingnessIndicator:
    """1 if any (listed) nullable feature is missing in the record."""

    features: tuple = ()  # empty tuple = every feature in the record


@dataclass(frozen=True)
class ExactQuantile:
    """Exact outcome indicator 1{y <= threshold} (threshold in days)."""

    threshold: float


@dataclass(frozen=True)
class SigmoidQuantile:
    """Smooth quantile surrogate sigmoid((threshold - y) / scale), days."""

    threshold: float
    scale: float = 10.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("sigmoid scale must be positive")


@dataclass(frozen=True)
class SubgroupScoped:
    """Outcome statistic restricted to a baseline subgroup (depth 1)."""

    subgroup: Predicate
    inner: Union[Moment, Indicator, ExactQuantile, SigmoidQuantile]

    def __post_init__(self):
        if isinstance(self.inner, SubgroupScoped):
            raise ValueError("subgroup scoping cannot nest")


StatisticFn = Union[
    Moment, Indicator, MissingnessIndicator, ExactQuantile, SigmoidQuantile, SubgroupScoped
]


def is_outcome_statistic(fn) -> bool:
    if isinstance(fn, (ExactQuantile, SigmoidQuantile)):
        return True
    if isinstance(fn, SubgroupScoped):
        return is_outcome_statistic(fn.inner)
    return False


def _sigmoid(u: float) -> float:
    u = max(-SIGMOID_CLAMP, min(SIGMOID_CLAMP, u))
    return 1.0 / (1.0 + math.exp(-u))


def evaluate_statistic(fn, x, y=None) -> float:
    """Evaluate one statistic at a record (and outcome, when outcome-typed).

    Missing policy: a Moment over a missing covariate raises
    MissingValueError (the caller owns the policy); an Indicator whose
    predicate cannot be decided evaluates to 0.
    """
    if isinstance(fn, Moment):
        v = x.get(fn.feature)
        if v is None:
            raise MissingValueError(f"moment feature {fn.feature!r} is missing")
        return float(_TRANSFORMS[fn.transform](float(v)))
    if isinstance(fn, Indicator):
        return 1.0 if fn.predicate.holds(x) else 0.0
    if isinstance(fn, MissingnessIndicator):
        names = fn.features or tuple(x.keys())
        return 1.0 if any(x.get(n) is None for n in names) else 0.0
    if isinstance(fn, ExactQuantile):
        return 1.0 if y <= fn.threshold else 0.0
    if isinstance(fn, SigmoidQuantile):
        return _sigmoid((fn.threshold - y) / fn.scale)
    if isinstance(fn, SubgroupScoped):
        if not fn.subgroup.holds(x):
            return 0.0
        return evaluate_statistic(fn.inner, x, y)
    raise TypeError(f"not a statistic: {fn!r}")


@dataclass(frozen=True)
class ConstraintSpec:
    """One statistic with its published target and hard/soft mode."""

    statistic: StatisticFn
    target: float
    mode: str = "hard"  # "hard" | "soft"
    penalty: float | None = None  # Tikhonov weight, required when soft
    label: str = ""

    def __post_init__(self):
        if not math.isfinite(self.target):
            raise ValueError("constraint target must be finite")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "soft" and not (self.penalty is not None and self.penalty > 0):
            raise ValueError("soft constraints need a positive penalty weight")
        if isinstance(self.statistic, SigmoidQuantile) and not 0.0 < self.target < 1.0:
            raise ValueError("sigmoid quantile targets must lie in (0, 1)")

    @property
    def name(self) -> str:
        return self.label or repr(self.statistic)


@dataclass(frozen=True)
class EligibilitySpec:
    """AND-combined inclusion predicates, OR-combined exclusions."""

    include: tuple = ()
    exclude: tuple = ()


def check_eligibility(spec: EligibilitySpec, x) -> bool:
    """True iff all inclusions hold and no exclusion holds.

    A missing value on any tested covariate makes the record ineligible.
    """
    for p in spec.include:
        if p.holds(x) is not True:
            return False
    for p in spec.exclude:
        if p.holds(x) is not False:
            return False
    return True


def validate_against_schema(spec: EligibilitySpec, schema) -> None:
    for p in list(spec.include) + list(spec.exclude):
        schema.feature(p.feature)  # raises KeyError when absent


def landmark_to_quantile(time_days: float, survival: float, scale: float = 10.0,
                         mode: str = "hard", penalty=None, label: str = "") -> ConstraintSpec:
    """Turn a published landmark S(t) into a smoothed quantile constraint.

    The target percentile is 1 - S(t) at threshold t. Survival values of
    exactly 0 or 1 have no quantile reading and are rejected.
    """
    if not 0.0 < survival < 1.0:
        raise DegenerateTargetError(f"landmark survival {survival} has no quantile form")
    return ConstraintSpec(
        statistic=SigmoidQuantile(threshold=float(time_days), scale=scale),
        target=1.0 - survival,
        mode=mode,
        penalty=penalty,
        label=label or f"landmark_{time_days:g}d",
    )
