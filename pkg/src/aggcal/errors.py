"""Exception types shared across the package."""


class AggcalError(Exception):
    """Base class for all package errors."""


class UnsupportedCapabilityError(AggcalError):
    """A model was asked for an interface it does not advertise."""


class MissingValueError(AggcalError):
    """A statistic referenced a covariate whose value is missing."""


class EmptyCohortError(AggcalError):
    """Eligibility filtering left no records (model/spec mismatch)."""


class InfeasibleConstraintsError(AggcalError):
    """Hard targets lie outside the relative interior of the sample hull."""

    def __init__(self, message, witness=None, constraint=None):
        super().__init__(message)
        self.witness = witness
        self.constraint = constraint


class DivergenceError(AggcalError):
    """The dual solver failed to converge; carries the final residuals."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class EmptySubgroupError(AggcalError):
    """A subgroup-scoped constraint matched zero total weight."""


class DegenerateTargetError(AggcalError):
    """A landmark survival of exactly 0 or 1 has no quantile form."""


class DegenerateInputError(AggcalError):
    """Survival input with no usable mass (e.g. all-zero weights)."""


class NonIdentifiableError(AggcalError):
    """Hazard-ratio fit is not identifiable (an arm has no events)."""


class InconsistentCurveError(AggcalError):
    """Digitized curve / at-risk table cannot be reconciled."""

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class ConfigError(AggcalError):
    """A configuration document failed to parse or validate."""


class StageError(AggcalError):
    """Pipeline failure attributed to the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
