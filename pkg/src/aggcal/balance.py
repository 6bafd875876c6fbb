"""Entropy balancing on an eligibility-filtered cohort.

Solves the dual of the weighted KL projection: weights proportional to the
reference measure times an exponential tilt in the constraint statistics,
with hard targets matched exactly and soft targets shrunk through a
Tikhonov penalty. The solver is a damped Newton iteration on the convex
dual with an LP feasibility gate run up front.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse

from .constraints import ConstraintSpec, check_eligibility, evaluate_statistic, is_outcome_statistic
from .errors import (
    DivergenceError,
    EmptyCohortError,
    InfeasibleConstraintsError,
    MissingValueError,
)

MULTIPLIER_CAP = 50.0
MAX_NEWTON_ITER = 500
GRAD_TOL = 1e-11
ILL_CONDITIONED = 1e12


@dataclass
class Cohort:
    """Weighted baseline records; weights sum to N (mean weight one)."""

    records: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.records) != self.weights.shape[0]:
            raise ValueError("records and weights differ in length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")
        if abs(self.weights.sum() - self.size) > 1e-9 * max(1.0, self.size):
            raise ValueError("weights must sum to the cohort size")

    @property
    def size(self) -> int:
        return len(self.records)


@dataclass
class DualState:
    """Solved multipliers with their achieved moments and residuals."""

    multipliers: np.ndarray
    labels: tuple
    modes: tuple
    targets: np.ndarray
    achieved: np.ndarray
    penalties: tuple  # None for hard entries
    iterations: int
    grad_norm: float
    converged: bool
    flagged_missing: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def residuals(self) -> np.ndarray:
        return self.achieved - self.targets

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "modes": list(self.modes),
            "multipliers": [float(v) for v in self.multipliers],
            "targets": [float(v) for v in self.targets],
            "achieved": [float(v) for v in self.achieved],
            "penalties": [None if p is None else float(p) for p in self.penalties],
            "iterations": int(self.iterations),
            "grad_norm": float(self.grad_norm),
            "converged": bool(self.converged),
            "flagged_missing": [int(v) for v in self.flagged_missing],
        }


@dataclass
class BalanceReport:
    """Weight diagnostics: ESS, concentration, and normalized quantiles."""

    n: int
    ess: float
    ess_over_n: float
    max_over_mean: float
    quantiles: dict  # "q01".."q99" of w / mean(w)
    top5_share: float
    top10_share: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "ess": self.ess,
            "ess_over_n": self.ess_over_n,
            "max_over_mean": self.max_over_mean,
            "quantiles": dict(self.quantiles),
            "top5_share": self.top5_share,
            "top10_share": self.top10_share,
        }


@dataclass
class FeasibilityResult:
    feasible: bool
    margin: float
    witness: np.ndarray | None = None  # separating direction when infeasible
    constraint: str | None = None  # most-violated constraint label


def filter_eligible(samples: list, spec) -> Cohort:
    """Keep eligible records with uniform weight one."""
    if not samples:
        raise ValueError("no candidate samples supplied")
    kept = [x for x in samples if check_eligibility(spec, x)]
    if not kept:
        raise EmptyCohortError("eligibility spec excluded every candidate record")
    return Cohort(records=kept, weights=np.ones(len(kept)))


def statistic_matrix(records, constraints):
    """(N, K) statistic values plus per-cell missing flags.

    A record missing a moment-referenced covariate contributes 0 to that
    column and is flagged; pair this with a soft missingness penalty so the
    flagged rows are down-weighted rather than silently trusted.
    """
    n, k = len(records), len(constraints)
    phi = np.zeros((n, k))
    flagged = np.zeros((n, k), dtype=bool)
    for j, spec in enumerate(constraints):
        if is_outcome_statistic(spec.statistic):
            raise ValueError(f"outcome statistic {spec.name!r} in baseline balancing")
        for i, x in enumerate(records):
            try:
                phi[i, j] = evaluate_statistic(spec.statistic, x)
            except MissingValueError:
                phi[i, j] = 0.0
                flagged[i, j] = True
    return phi, flagged


def _dual_value(nu, logu, phi, b, soft_mask, rho):
    logits = logu + phi @ nu
    m = logits.max()
    val = m + np.log(np.exp(logits - m).sum()) - nu @ b
    if soft_mask.any():
        val += 0.5 * np.sum(nu[soft_mask] ** 2 / rho[soft_mask])
    return val


def _softmax_weights(nu, logu, phi):
    logits = logu + phi @ nu
    z = np.exp(logits - logits.max())
    return z / z.sum()


def solve_entropy_balance(cohort: Cohort, constraints, *, check_feasible: bool = True,
                          tol: float = GRAD_TOL, max_iter: int = MAX_NEWTON_ITER):
    """Reweight the cohort so its moments meet the constraint targets.

    The existing cohort weights act as the reference measure, so a cohort
    that already carries calibration weights is rebalanced relative to them
    (the KL term penalizes deviation from those weights, not from uniform).

    Returns (cohort with new weights, DualState).
    """
    constraints = list(constraints)
    n = cohort.size
    u = cohort.weights / cohort.weights.sum()
    with np.errstate(divide="ignore"):
        logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), -np.inf)

    if not constraints:
        w = n * u
        state = DualState(np.zeros(0), (), (), np.zeros(0), np.zeros(0), (), 0, 0.0, True)
        return Cohort(cohort.records, w), state

    phi, flagged = statistic_matrix(cohort.records, constraints)
    b = np.array([c.target for c in constraints], dtype=float)
    soft_mask = np.array([c.mode == "soft" for c in constraints])
    rho = np.array([c.penalty if c.mode == "soft" else np.inf for c in constraints], dtype=float)
    labels = tuple(c.name for c in constraints)

    hard_idx = np.flatnonzero(~soft_mask)
    if check_feasible and hard_idx.size:
        active = u > 0
        result = _feasibility_from_matrix(phi[np.ix_(active, hard_idx)], b[hard_idx])
        if not result.feasible:
            name = labels[hard_idx[int(np.argmax(np.abs(result.witness)))]] \
                if result.witness is not None else None
            raise InfeasibleConstraintsError(
                f"hard targets outside the relative interior of the sample hull"
                f" (worst: {name})", witness=result.witness, constraint=name)

    def grad_at(nu, p):
        achieved = p @ phi
        g = achieved - b
        g[soft_mask] += nu[soft_mask] / rho[soft_mask]
        return achieved, g

    nu = np.zeros(len(constraints))
    p = _softmax_weights(nu, logu, phi)
    achieved, g = grad_at(nu, p)
    val = _dual_value(nu, logu, phi, b, soft_mask, rho)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= tol:
            iterations -= 1
            break
        hess = (phi * p[:, None]).T @ phi - np.outer(achieved, achieved)
        if soft_mask.any():
            hess = hess + np.diag(np.where(soft_mask, 1.0 / rho, 0.0))
        use_newton = np.linalg.cond(hess) <= ILL_CONDITIONED
        if use_newton:
            step = np.linalg.solve(hess, -g)
        else:
            # quasi-Newton rescue: polish with L-BFGS before resuming
            res = scipy.optimize.minimize(
                _dual_value, nu, args=(logu, phi, b, soft_mask, rho),
                jac=lambda v: grad_at(v, _softmax_weights(v, logu, phi))[1],
                method="L-BFGS-B", options={"maxiter": 200, "ftol": 1e-15, "gtol": 1e-12})
            nu = res.x
            p = _softmax_weights(nu, logu, phi)
            achieved, g = grad_at(nu, p)
            val = _dual_value(nu, logu, phi, b, soft_mask, rho)
            continue
        # backtracking line search (Armijo)
        t, slope = 1.0, g @ step
        for _ in range(60):
            cand = nu + t * step
            cand_val = _dual_value(cand, logu, phi, b, soft_mask, rho)
            if cand_val <= val + 1e-4 * t * slope:
                break
            t *= 0.5
        nu = nu + t * step
        p = _softmax_weights(nu, logu, phi)
        achieved, g = grad_at(nu, p)
        val = _dual_value(nu, logu, phi, b, soft_mask, rho)
        if np.max(np.abs(nu)) > MULTIPLIER_CAP:
            raise DivergenceError(
                f"multipliers exceeded magnitude {MULTIPLIER_CAP} "
                f"(suspected infeasible hard block)", residuals=achieved - b)

    grad_norm = float(np.max(np.abs(g)))
    converged = grad_norm <= tol
    if not converged:
        raise DivergenceError(
            f"dual solver failed to reach tolerance {tol} in {max_iter} iterations",
            residuals=achieved - b)

    w = cohort.size * p
    state = DualState(
        multipliers=nu, labels=labels,
        modes=tuple(c.mode for c in constraints), targets=b, achieved=achieved,
        penalties=tuple(c.penalty for c in constraints),
        iterations=iterations, grad_norm=grad_norm, converged=converged,
        flagged_missing=flagged.sum(axis=0))
    return Cohort(cohort.records, w), state


def feasibility_check(cohort: Cohort, hard_constraints) -> FeasibilityResult:
    """Is the hard target vector in the relative interior of the sample hull?

    Decided by linear programming: feasibility with a strictly positive
    weight floor certifies relative-interior membership; otherwise a second
    LP produces a separating (or supporting) direction as the witness.
    """
    hard = [c for c in hard_constraints if c.mode == "hard"]
    if not hard:
        return FeasibilityResult(True, margin=np.inf)
    phi, _ = statistic_matrix(cohort.records, hard)
    active = cohort.weights > 0
    b = np.array([c.target for c in hard], dtype=float)
    result = _feasibility_from_matrix(phi[active], b)
    if not result.feasible and result.witness is not None:
        result.constraint = hard[int(np.argmax(np.abs(result.witness)))].name
    return result


def _feasibility_from_matrix(phi: np.ndarray, b: np.ndarray) -> FeasibilityResult:
    n, k = phi.shape
    # substitute p = q + (delta/n) 1 with q >= 0: only equality constraints remain
    col_mean = phi.mean(axis=0)
    a_eq = scipy.sparse.hstack(
        [scipy.sparse.vstack([np.ones((1, n)), phi.T]),
         np.concatenate([[1.0], col_mean])[:, None]], format="csc")
    b_eq = np.concatenate([[1.0], b])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    bounds = [(0, None)] * n + [(None, 1.0)]
    lp = scipy.optimize.linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if lp.status == 0 and lp.x is not None and lp.x[-1] > 1e-12:
        return FeasibilityResult(True, margin=float(lp.x[-1]))

    # witness: direction y with y.(phi_i - b) <= 0 for all i maximizing y.(b - mean)
    a_ub = phi - b
    obj = -(b - col_mean)
    wit = scipy.optimize.linprog(
        obj, A_ub=a_ub, b_ub=np.zeros(n), bounds=[(-1.0, 1.0)] * k, method="highs")
    witness = None
    if wit.status == 0 and wit.x is not None and np.max(np.abs(wit.x)) > 1e-12:
        witness = wit.x / np.max(np.abs(wit.x))
    return FeasibilityResult(False, margin=float(lp.x[-1]) if lp.x is not None else -np.inf,
                             witness=witness)


def weight_diagnostics(cohort: Cohort) -> BalanceReport:
    """ESS, weight concentration, and quantiles of the normalized weight."""
    w = cohort.weights
    n = cohort.size
    ess = float(w.sum() ** 2 / np.sum(w**2))
    rel = w / w.mean()
    probs = {f"q{int(q * 100):02d}": float(np.quantile(rel, q))
             for q in (0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99)}
    return BalanceReport(
        n=n, ess=ess, ess_over_n=ess / n, max_over_mean=float(rel.max()),
        quantiles=probs,
        top5_share=_top_share(w, 0.05), top10_share=_top_share(w, 0.10))


def _top_share(w: np.ndarray, frac: float) -> float:
    """Share of total weight carried by the top `frac` of rows (interpolated)."""
    desc = np.sort(w)[::-1]
    cum = np.concatenate([[0.0], np.cumsum(desc)]) / w.sum()
    counts = np.arange(len(w) + 1, dtype=float)
    return float(np.interp(frac * len(w), counts, cum))
