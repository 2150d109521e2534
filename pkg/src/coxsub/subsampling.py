"""Subsampling plans, weighted draws, and the two-step estimator.

The selection probabilities are driven by per-record martingale score
residual norms: records whose residuals are large carry more information
about the coefficients and are sampled more often.  Approximated plans
build the residuals from pilot-subsample tables only; oracle plans use
full-data tables and exist for optimality testing, not production.
"""

from __future__ import annotations

import csv
import os
import time as _time
import warnings
from dataclasses import dataclass

import numpy as np

from .breslow import (
    PilotContext,
    RiskSetMean,
    breslow_cumhaz,
    pilot_breslow,
    score_residual_norms,
    score_residuals,
)
from .data import SurvivalDataset
from .errors import CoxSubError, NumericsError, PilotError, SingularHessianError, TwoStepError
from .partial_likelihood import CoxFit, SolverOptions, newton_solve

UNIFORM = "uniform"
LOPT_APPROX = "lopt_approx"
AOPT_APPROX = "aopt_approx"
LOPT_ORACLE = "lopt_oracle"
AOPT_ORACLE = "aopt_oracle"

_SUM_TOL = 1e-12
_FLOOR_TOL = 1e-15


@dataclass(frozen=True)
class SubsamplePlan:
    """A probability vector over the records plus its construction recipe.

    ``delta`` is the uniform-mixing rate: 0 is a pure residual-driven plan,
    1 is pure uniform.  Mixed plans have every probability floored at
    ``delta/n`` so importance weights stay bounded.
    """

    probs: np.ndarray
    method: str
    delta: float
    pilot: PilotContext | None = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty 1-D array")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        n = probs.size
        if probs.min() < self.delta / n - _FLOOR_TOL:
            raise ValueError("mixed plan violates the delta/n probability floor")
        if self.delta > 0 and probs.min() <= 0.0:
            raise ValueError("mixed plans must have strictly positive probabilities")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n(self) -> int:
        return self.probs.size

    def write_csv(self, path: str | os.PathLike, status: np.ndarray | None = None) -> None:
        """Export per-record probabilities (optionally with event status)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if status is None:
                writer.writerow(["index", "prob"])
                for i, p in enumerate(self.probs):
                    writer.writerow([i, repr(float(p))])
            else:
                writer.writerow(["index", "prob", "status"])
                for i, p in enumerate(self.probs):
                    writer.writerow([i, repr(float(p)), int(status[i])])


@dataclass(frozen=True)
class Subsample:
    """Drawn record indices (with replacement) and their importance weights."""

    indices: np.ndarray
    weights: np.ndarray
    plan_method: str

    def __post_init__(self):
        idx = np.asarray(self.indices)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.shape != w.shape or idx.ndim != 1:
            raise ValueError("indices and weights must be matching 1-D arrays")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and positive")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class CovarianceEstimate:
    """Sandwich covariance of the two-step estimate, subsample-only.

    ``covariance = inv(curvature) @ score_outer @ inv(curvature)`` where
    ``curvature`` is the inverse-probability-weighted at-risk curvature and
    ``score_outer`` the weighted outer product of the per-draw residuals.
    """

    curvature: np.ndarray
    score_outer: np.ndarray
    covariance: np.ndarray
    standard_errors: np.ndarray


@dataclass(frozen=True)
class TwoStepResult:
    pilot: PilotContext
    plan: SubsamplePlan
    subsample: Subsample
    fit: CoxFit
    covariance: CovarianceEstimate | None
    timings: dict


def uniform_plan(n: int, delta: float = 1.0) -> SubsamplePlan:
    return SubsamplePlan(probs=np.full(n, 1.0 / n), method=UNIFORM, delta=delta)


def draw_uniform(ds: SurvivalDataset, r0: int, rng: np.random.Generator) -> Subsample:
    """Uniform with-replacement draw; importance weights are identically 1."""
    if r0 < 1:
        raise ValueError("subsample size must be at least 1")
    indices = rng.integers(0, ds.n, size=r0)
    return Subsample(indices=indices, weights=np.ones(r0), plan_method=UNIFORM)


def fit_pilot(ds: SurvivalDataset, pilot: Subsample, opts: SolverOptions | None = None) -> PilotContext:
    """Fit the pilot estimating equation and precompute the pilot tables.

    The pilot solve is the plain (unit-weight) partial likelihood on the
    pilot multiset; its curvature matrix doubles as the pilot information
    matrix used by the A-optimal probabilities.
    """
    idx = pilot.indices
    if not np.any(ds.status[idx] == 1):
        raise PilotError("pilot uninformative (no events); increase the pilot size")
    try:
        fit = newton_solve(ds, weights=None, subset=idx, opts=opts, role="pilot")
    except NumericsError as exc:
        raise PilotError(f"pilot fit failed ({exc}); increase the pilot size") from exc
    if not fit.converged:
        raise PilotError("pilot fit did not converge; increase the pilot size")
    cumhaz = pilot_breslow(ds, idx, fit.beta)
    covariates = np.ascontiguousarray(ds.covariates[idx])
    xbar = RiskSetMean.build(ds.time[idx], covariates, fit.beta)
    return PilotContext(
        pilot_indices=idx,
        time=ds.time[idx],
        status=ds.status[idx],
        covariates=covariates,
        pilot_beta=fit.beta,
        fit=fit,
        pilot_cumhaz=cumhaz,
        xbar=xbar,
    )


def _mixed_plan(norms: np.ndarray, delta: float, method: str, pilot: PilotContext | None) -> SubsamplePlan:
    n = norms.size
    total = norms.sum()
    if total <= 0.0:
        warnings.warn(
            "all residual norms are zero; falling back to uniform probabilities", stacklevel=3
        )
        base = np.full(n, 1.0 / n)
    else:
        base = norms / total
    probs = (1.0 - delta) * base + delta / n
    return SubsamplePlan(probs=probs, method=method, delta=delta, pilot=pilot)


def _approx_residuals(ds: SurvivalDataset, ctx: PilotContext) -> np.ndarray:
    return score_residuals(ds, ctx.xbar, ctx.pilot_cumhaz, ctx.pilot_beta)


def compute_lopt_probs(ds: SurvivalDataset, ctx: PilotContext, delta: float) -> SubsamplePlan:
    """L-optimal plan approximated through the pilot tables, mixed with uniform."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    norms = score_residual_norms(ds, ctx.xbar, ctx.pilot_cumhaz, ctx.pilot_beta)
    return _mixed_plan(norms, delta, LOPT_APPROX, ctx)


def compute_aopt_probs(ds: SurvivalDataset, ctx: PilotContext, delta: float) -> SubsamplePlan:
    """A-optimal plan: residuals premultiplied by the inverse pilot curvature."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    resids = _approx_residuals(ds, ctx)
    psi = ctx.curvature()
    try:
        np.linalg.cholesky(psi)
    except np.linalg.LinAlgError:
        cond = float(np.linalg.cond(psi)) if np.all(np.isfinite(psi)) else float("inf")
        raise SingularHessianError("pilot curvature matrix is singular", cond=cond) from None
    transformed = np.linalg.solve(psi, resids.T).T
    norms = np.linalg.norm(transformed, axis=1)
    return _mixed_plan(norms, delta, AOPT_APPROX, ctx)


def _oracle_residual_norms(ds: SurvivalDataset, mpl: CoxFit, premultiply: np.ndarray | None) -> np.ndarray:
    xbar = RiskSetMean.build(ds.time, np.ascontiguousarray(ds.covariates), mpl.beta)
    cumhaz = breslow_cumhaz(ds, mpl.beta)
    if premultiply is None:
        return score_residual_norms(ds, xbar, cumhaz, mpl.beta)
    resids = np.linalg.solve(premultiply, score_residuals(ds, xbar, cumhaz, mpl.beta).T).T
    return np.linalg.norm(resids, axis=1)


def oracle_lopt_probs(ds: SurvivalDataset, mpl: CoxFit) -> SubsamplePlan:
    """Unmixed L-optimal plan built from full-data tables (testing only)."""
    if mpl.role != "full_mpl":
        raise ValueError("oracle plans require a full-data fit")
    norms = _oracle_residual_norms(ds, mpl, None)
    return _mixed_plan(norms, 0.0, LOPT_ORACLE, None)


def oracle_aopt_probs(ds: SurvivalDataset, mpl: CoxFit) -> SubsamplePlan:
    if mpl.role != "full_mpl":
        raise ValueError("oracle plans require a full-data fit")
    try:
        np.linalg.cholesky(mpl.hessian)
    except np.linalg.LinAlgError:
        cond = float(np.linalg.cond(mpl.hessian)) if np.all(np.isfinite(mpl.hessian)) else float("inf")
        raise SingularHessianError("full-data curvature matrix is singular", cond=cond) from None
    norms = _oracle_residual_norms(ds, mpl, mpl.hessian)
    return _mixed_plan(norms, 0.0, AOPT_ORACLE, None)


def trace_score_variance(
    ds: SurvivalDataset,
    plan: SubsamplePlan,
    mpl: CoxFit,
    r: int,
    norms: np.ndarray | None = None,
) -> float:
    """L-optimality objective of a plan: trace of the sampling covariance
    of the importance-weighted score for a subsample of size ``r``.

    Records with a zero residual contribute nothing regardless of their
    probability; a zero probability on a contributing record makes the
    objective infinite.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    if norms is None:
        norms = _oracle_residual_norms(ds, mpl, None)
    active = norms > 0.0
    if np.any(active & (plan.probs == 0.0)):
        return float("inf")
    sq = np.zeros_like(norms)
    sq[active] = norms[active] ** 2 / plan.probs[active]
    return float(sq.sum() / (r * ds.n**2))


def draw_weighted(plan: SubsamplePlan, r: int, rng: np.random.Generator) -> Subsample:
    """Draw ``r`` indices i.i.d. from the plan via inverse-CDF sampling.

    The cumulative table costs O(n) once and each draw is a binary search;
    importance weights are ``1/(n*pi)`` for the drawn records.
    """
    if r < 1:
        raise ValueError("subsample size must be at least 1")
    cdf = np.cumsum(plan.probs)
    indices = np.searchsorted(cdf, rng.random(r) * cdf[-1], side="right")
    indices = np.minimum(indices, plan.n - 1)
    weights = 1.0 / (plan.n * plan.probs[indices])
    return Subsample(indices=indices, weights=weights, plan_method=plan.method)


def weighted_fit(
    ds: SurvivalDataset,
    sub: Subsample,
    init: np.ndarray | None = None,
    opts: SolverOptions | None = None,
) -> CoxFit:
    """Solve the inverse-probability-weighted estimating equation on a subsample.

    Risk sets are formed within the subsample multiset only; the weights
    make the weighted score conditionally unbiased for the full-data one.
    """
    if sub.size < 2:
        raise NumericsError("subsample too small: no risk-set variation with fewer than 2 draws")
    if opts is None:
        opts = SolverOptions(init=init)
    elif init is not None:
        opts = SolverOptions(
            tol_score=opts.tol_score,
            tol_step=opts.tol_step,
            max_iter=opts.max_iter,
            step_halving_max=opts.step_halving_max,
            init=init,
        )
    return newton_solve(ds, weights=sub.weights, subset=sub.indices, opts=opts, role="two_step")


def estimate_covariance(
    ds: SurvivalDataset, ctx: PilotContext, sub: Subsample, fit: CoxFit
) -> CovarianceEstimate:
    """Subsample-only sandwich covariance of the two-step estimate.

    The middle term integrates each drawn record against the pilot hazard
    and pilot risk-set mean re-evaluated at the final estimate; the outer
    terms invert the weighted curvature at the solution.
    """
    if not fit.converged:
        raise ValueError("covariance requires a converged fit")
    r = sub.size
    cumhaz, xbar = ctx.tables_at(fit.beta)
    resids = score_residuals(ds, xbar, cumhaz, fit.beta, subset=sub.indices)
    scaled = sub.weights[:, None] * resids
    score_outer = (scaled.T @ scaled) / r**2
    # per-draw curvature: explicit 1/r normalisation against the count, so
    # halving every probability doubles it (and quadruples score_outer)
    curvature = fit.hessian * (sub.weights.sum() / r)
    try:
        np.linalg.cholesky(curvature)
    except np.linalg.LinAlgError:
        cond = float(np.linalg.cond(curvature)) if np.all(np.isfinite(curvature)) else float("inf")
        raise SingularHessianError("weighted curvature matrix is singular", cond=cond) from None
    covariance = np.linalg.solve(curvature, np.linalg.solve(curvature, score_outer).T)
    covariance = (covariance + covariance.T) / 2.0
    return CovarianceEstimate(
        curvature=curvature,
        score_outer=score_outer,
        covariance=covariance,
        standard_errors=np.sqrt(np.maximum(np.diag(covariance), 0.0)),
    )


def _phase(timings: dict, name: str):
    class _Timer:
        def __enter__(self):
            self._t0 = _time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            timings[name] = _time.perf_counter() - self._t0
            if exc is not None and isinstance(exc, CoxSubError) and not isinstance(exc, TwoStepError):
                raise TwoStepError(name, str(exc)) from exc
            return False

    return _Timer()


def two_step(
    ds: SurvivalDataset,
    r0: int,
    r: int,
    delta: float,
    criterion: str,
    rng: np.random.Generator,
    opts: SolverOptions | None = None,
) -> TwoStepResult:
    """Run the full two-step procedure: pilot, plan, draw, fit, covariance.

    ``criterion`` is one of ``"lopt"``, ``"aopt"`` or ``"unif"``.  The pilot
    subsample never enters the second-stage estimating equation except
    through the pilot estimate and its hazard/risk-set tables.
    """
    crit = criterion.lower()
    if crit not in ("lopt", "aopt", "unif"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    timings: dict = {}
    with _phase(timings, "pilot_fit"):
        pilot_sub = draw_uniform(ds, r0, rng)
        ctx = fit_pilot(ds, pilot_sub, opts=opts)
    with _phase(timings, "probability_pass"):
        if crit == "lopt":
            plan = compute_lopt_probs(ds, ctx, delta)
        elif crit == "aopt":
            plan = compute_aopt_probs(ds, ctx, delta)
        else:
            plan = uniform_plan(ds.n)
    with _phase(timings, "draw"):
        sub = draw_weighted(plan, r, rng)
    with _phase(timings, "second_fit"):
        fit = weighted_fit(ds, sub, init=ctx.pilot_beta, opts=opts)
    covariance = None
    if fit.converged:
        with _phase(timings, "covariance"):
            covariance = estimate_covariance(ds, ctx, sub, fit)
    return TwoStepResult(
        pilot=ctx, plan=plan, subsample=sub, fit=fit, covariance=covariance, timings=timings
    )
