"""Synthetic survival data generation and replication studies.

Failure times follow a proportional hazards model with baseline hazard
``0.5 * t`` (cumulative ``0.25 * t**2``), inverted analytically from a
uniform draw.  Censoring times are uniform on ``(0, c0)`` with ``c0``
calibrated by bisection against Monte Carlo censoring-rate estimates on a
fixed batch, so the search is deterministic given the seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time as _time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing
import numpy as np

from .data import SurvivalDataset
from .errors import CalibrationError, CoxSubError
from .partial_likelihood import SolverOptions, newton_solve
from .subsampling import SubsamplePlan, two_step

CASES = ("I", "II", "III", "IV")
DEFAULT_BETA = (-1.0, -0.5, 0.0, 0.5, 1.0)
_CALIBRATION_STREAM = 0x1CA1  # entropy domain separating calibration from data draws


def ar1_covariance(p: int, rho: float = 0.5) -> np.ndarray:
    """Autoregressive correlation matrix with entries rho**|j-k|."""
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def true_cumulative_hazard(t) -> np.ndarray | float:
    """Baseline cumulative hazard of the simulated model."""
    return 0.25 * np.square(t)


@dataclass(frozen=True)
class SimConfig:
    case: str = "I"
    n: int = 100_000
    beta_true: tuple = DEFAULT_BETA
    target_cr: float = 0.2
    c0: float | None = None
    seed: int = 0
    heavy_tail_cov: str = "match"  # "match": covariance equals the AR(1) target; "scale": raw scale matrix

    def __post_init__(self):
        case = str(self.case).upper()
        if case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case!r}")
        object.__setattr__(self, "case", case)
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 < self.target_cr < 1.0:
            raise ValueError("target_cr must lie in (0, 1)")
        if self.c0 is not None and self.c0 <= 0:
            raise ValueError("c0 must be positive")
        if self.heavy_tail_cov not in ("match", "scale"):
            raise ValueError("heavy_tail_cov must be 'match' or 'scale'")
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))

    @property
    def p(self) -> int:
        return len(self.beta_true)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.beta_true)


def gen_covariates(
    case: str,
    n: int,
    rng: np.random.Generator,
    p: int = 5,
    heavy_tail_cov: str = "match",
) -> np.ndarray:
    """Draw n i.i.d. covariate rows for the given simulation case.

    Cases: I uniform(-1,1); II equal mixture of two correlated normals
    centred at -1 and +1; III independent exponentials with rate 2;
    IV correlated heavy-tailed rows (multivariate t, 10 df), scaled so the
    covariance matrix equals the AR(1) target unless ``heavy_tail_cov`` is
    "scale".
    """
    case = str(case).upper()
    if case == "I":
        return rng.uniform(-1.0, 1.0, size=(n, p))
    if case == "III":
        return rng.exponential(scale=0.5, size=(n, p))
    chol = np.linalg.cholesky(ar1_covariance(p))
    if case == "II":
        signs = rng.integers(0, 2, size=n) * 2 - 1
        z = rng.standard_normal((n, p))
        return signs[:, None] + z @ chol.T
    if case == "IV":
        df = 10
        z = rng.standard_normal((n, p)) @ chol.T
        mix = rng.chisquare(df, size=n)
        scale = (df - 2.0) if heavy_tail_cov == "match" else float(df)
        return z * np.sqrt(scale / mix)[:, None]
    raise ValueError(f"case must be one of {CASES}, got {case!r}")


def gen_failure_times(
    X: np.ndarray,
    beta: np.ndarray,
    rng: np.random.Generator | None = None,
    u: np.ndarray | None = None,
) -> np.ndarray:
    """Invert the cumulative hazard at a uniform draw.

    With cumulative baseline hazard ``0.25*t**2`` the failure time is
    ``2*sqrt(-log(u))*exp(-beta'x/2)``.  ``u`` may be passed explicitly for
    testing; otherwise it is drawn on (0, 1].
    """
    eta = np.asarray(X) @ np.asarray(beta)
    if u is None:
        if rng is None:
            raise ValueError("either rng or u must be provided")
        u = 1.0 - rng.random(eta.shape[0])
    return 2.0 * np.sqrt(-np.log(u)) * np.exp(-eta / 2.0)


def _censoring_rate(t_fail: np.ndarray, unit_censor: np.ndarray, c0: float) -> float:
    return float(np.mean(t_fail > c0 * unit_censor))


def calibrate_c0(
    case: str,
    beta: np.ndarray,
    target_cr: float,
    rng: np.random.Generator | None = None,
    tol: float = 0.002,
    batch: int = 100_000,
    seed: int | None = None,
    cache_path: str | os.PathLike | None = None,
    heavy_tail_cov: str = "match",
) -> float:
    """Bisection search for the censoring upper bound hitting ``target_cr``.

    The Monte Carlo batch is drawn once and held fixed across evaluations,
    so the empirical censoring rate is exactly monotone in ``c0`` and the
    search is deterministic given the seed.  Results keyed by the full
    configuration can be cached on disk.
    """
    if not 0.01 < target_cr < 0.99:
        raise ValueError("target_cr must lie in (0.01, 0.99)")
    beta = np.asarray(beta, dtype=np.float64)
    key = None
    if rng is None:
        # own stream derivation: safe to key a cache entry on the seed
        if cache_path is not None and seed is not None:
            raw = json.dumps(
                ["v2", str(case).upper(), beta.tolist(), target_cr, tol, batch, seed, heavy_tail_cov]
            )
            key = hashlib.sha256(raw.encode()).hexdigest()[:24]
            cached = _cache_get(cache_path, key)
            if cached is not None:
                return cached
        entropy = None if seed is None else [int(seed), _CALIBRATION_STREAM]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))

    X = gen_covariates(case, batch, rng, p=beta.size, heavy_tail_cov=heavy_tail_cov)
    t_fail = gen_failure_times(X, beta, rng)
    unit_censor = rng.random(batch)

    lo, hi = 1e-9, 1.0
    for _ in range(200):
        if _censoring_rate(t_fail, unit_censor, hi) <= target_cr:
            break
        hi *= 2.0
    else:
        raise CalibrationError("could not bracket the target censoring rate from above")
    if _censoring_rate(t_fail, unit_censor, lo) < target_cr:
        raise CalibrationError("could not bracket the target censoring rate from below")

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        cr = _censoring_rate(t_fail, unit_censor, mid)
        if abs(cr - target_cr) <= tol:
            if key is not None:
                _cache_put(cache_path, key, mid)
            return mid
        if cr > target_cr:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    raise CalibrationError("bisection failed to reach the target censoring rate")


def _cache_get(path, key):
    try:
        with open(path) as fh:
            table = json.load(fh)
        return table.get(key)
    except (OSError, json.JSONDecodeError):
        return None


def _cache_put(path, key, value):
    table = {}
    try:
        with open(path) as fh:
            table = json.load(fh)
    except (OSError, json.JSONDecodeError):
        pass
    table[key] = value
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(table, fh, indent=0, sort_keys=True)
    except OSError:
        pass


def resolve_c0(cfg: SimConfig, cache_path: str | os.PathLike | None = None) -> SimConfig:
    """Return a config with ``c0`` filled in, calibrating it if needed.

    Calibration uses a stream in its own entropy domain, so its draws never
    overlap the dataset streams derived from the same seed.
    """
    if cfg.c0 is not None:
        return cfg
    c0 = calibrate_c0(
        cfg.case,
        cfg.beta,
        cfg.target_cr,
        seed=cfg.seed,
        cache_path=cache_path,
        heavy_tail_cov=cfg.heavy_tail_cov,
    )
    return replace(cfg, c0=c0)


def gen_dataset(cfg: SimConfig, rng: np.random.Generator) -> SurvivalDataset:
    """Generate one dataset: covariates, failure times, uniform censoring.

    Draw order (covariates, failure uniforms, censoring uniforms) is part
    of the determinism contract.  ``cfg.c0`` must be set; see
    :func:`resolve_c0`.
    """
    if cfg.c0 is None:
        raise ValueError("cfg.c0 is unset; call resolve_c0 first")
    X = gen_covariates(cfg.case, cfg.n, rng, p=cfg.p, heavy_tail_cov=cfg.heavy_tail_cov)
    t_fail = gen_failure_times(X, cfg.beta, rng)
    censor = cfg.c0 * rng.random(cfg.n)
    time = np.minimum(t_fail, censor)
    status = (t_fail <= censor).astype(np.int8)
    return SurvivalDataset(covariates=X, time=time, status=status)


@dataclass(frozen=True)
class ReplicationReport:
    """Aggregated estimates across replications of one method."""

    method: str
    mode: str  # "fixed": one dataset, sampling varies; "fresh": new data each rep
    reference: str  # what mse/bias/ese are measured against: "mpl" or "truth"
    n_reps: int
    n_failures: int
    mse: float
    bias: np.ndarray
    ese: np.ndarray
    mean_se: np.ndarray
    coverage: np.ndarray
    timings: dict
    r0: int | None = None
    r: int | None = None
    delta: float | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "reference": self.reference,
            "n_reps": self.n_reps,
            "n_failures": self.n_failures,
            "mse": self.mse,
            "bias": list(self.bias),
            "ese": list(self.ese),
            "mean_se": list(self.mean_se),
            "coverage": list(self.coverage),
            "timings": dict(self.timings),
            "r0": self.r0,
            "r": self.r,
            "delta": self.delta,
        }


_METHODS = ("lopt", "aopt", "unif", "full")

# worker-process state for fixed-dataset parallel runs
_SHARED: dict = {}


def _rep_once(
    ds: SurvivalDataset | None,
    cfg: SimConfig,
    method: str,
    r0: int,
    r: int,
    delta: float,
    seed_seq: np.random.SeedSequence,
    mode: str,
    solver_opts: SolverOptions | None,
):
    """One replication; returns (estimate, standard errors, timings)."""
    rng = np.random.default_rng(seed_seq)
    if mode == "fresh":
        ds = gen_dataset(cfg, rng)
    if method == "full":
        t0 = _time.perf_counter()
        fit = newton_solve(ds, opts=solver_opts)
        wall = _time.perf_counter() - t0
        return fit.beta, fit.standard_errors(ds.n), {"full_fit": wall}
    res = two_step(ds, r0, r, delta, method, rng, opts=solver_opts)
    if res.covariance is None:
        raise CoxSubError("two-step fit did not converge")
    return res.fit.beta, res.covariance.standard_errors, res.timings


def _worker_init(cfg, data_seq, mode):
    if mode == "fixed":
        _SHARED["ds"] = gen_dataset(cfg, np.random.default_rng(data_seq))
    else:
        _SHARED["ds"] = None


def _worker_run(payload):
    cfg, method, r0, r, delta, seed_seq, mode, solver_opts = payload
    try:
        return _rep_once(_SHARED["ds"], cfg, method, r0, r, delta, seed_seq, mode, solver_opts)
    except CoxSubError as exc:
        return ("failure", str(exc))


def run_replications(
    cfg: SimConfig,
    method: str,
    r0: int = 300,
    r: int = 1000,
    delta: float = 0.1,
    n_reps: int = 200,
    seed: int | None = None,
    mode: str = "fixed",
    threads: int = 1,
    solver_opts: SolverOptions | None = None,
    cache_path: str | os.PathLike | None = None,
) -> ReplicationReport:
    """Run a replication study of one estimator and aggregate the results.

    ``mode="fixed"`` generates one dataset and lets only the subsampling
    randomness vary, measuring error against the full-data estimate;
    ``mode="fresh"`` regenerates the data each replication and measures
    against the known true coefficients.  Replications are independent
    tasks with per-replication derived seeds; parallel runs aggregate in
    replication order, so results match a serial run exactly.
    """
    method = method.lower()
    if method not in _METHODS:
        raise ValueError(f"method must be one of {_METHODS}, got {method!r}")
    if mode not in ("fixed", "fresh"):
        raise ValueError("mode must be 'fixed' or 'fresh'")
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    cfg = resolve_c0(cfg, cache_path=cache_path)
    root = np.random.SeedSequence(seed if seed is not None else cfg.seed)
    data_seq, *rep_seqs = root.spawn(n_reps + 1)

    ds = None
    reference = "truth"
    ref = cfg.beta
    if mode == "fixed":
        ds = gen_dataset(cfg, np.random.default_rng(data_seq))
        mpl = newton_solve(ds, opts=solver_opts)
        reference = "mpl"
        ref = mpl.beta

    results: list = []
    if mode == "fixed" and method == "full":
        # deterministic: every replication refits the same data
        one = _rep_once(ds, cfg, method, r0, r, delta, rep_seqs[0], mode, solver_opts)
        results = [one] * n_reps
    elif threads > 1:
        payloads = [(cfg, method, r0, r, delta, s, mode, solver_opts) for s in rep_seqs]
        mp_ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(
            max_workers=threads,
            mp_context=mp_ctx,
            initializer=_worker_init,
            initargs=(cfg, data_seq, mode),
        ) as pool:
            results = list(pool.map(_worker_run, payloads, chunksize=8))
    else:
        for s in rep_seqs:
            try:
                results.append(_rep_once(ds, cfg, method, r0, r, delta, s, mode, solver_opts))
            except CoxSubError as exc:
                results.append(("failure", str(exc)))

    estimates, ses, timing_rows = [], [], []
    n_failures = 0
    for item in results:
        if isinstance(item, tuple) and len(item) == 2 and item[0] == "failure":
            n_failures += 1
            continue
        est, se, timings = item
        estimates.append(est)
        ses.append(se)
        timing_rows.append(timings)
    if len(estimates) < 2:
        raise CoxSubError(f"too many failed replications ({n_failures} of {n_reps})")

    est = np.asarray(estimates)
    se = np.asarray(ses)
    truth = cfg.beta
    mse = float(np.mean(np.sum((est - ref) ** 2, axis=1)))
    bias = est.mean(axis=0) - ref
    ese = est.std(axis=0, ddof=1)
    mean_se = se.mean(axis=0)
    covered = np.abs(est - truth) <= 1.96 * se
    phase_keys = sorted({k for row in timing_rows for k in row})
    timings = {k: float(np.mean([row.get(k, 0.0) for row in timing_rows])) for k in phase_keys}
    return ReplicationReport(
        method=method,
        mode=mode,
        reference=reference,
        n_reps=n_reps,
        n_failures=n_failures,
        mse=mse,
        bias=bias,
        ese=ese,
        mean_se=mean_se,
        coverage=covered.mean(axis=0),
        timings=timings,
        r0=None if method == "full" else r0,
        r=None if method == "full" else r,
        delta=None if method == "full" else delta,
    )


def _fivenum(x: np.ndarray) -> tuple:
    """Tukey five-number summary: min, lower hinge, median, upper hinge, max."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    if n == 0:
        warnings.warn("empty group in five-number summary", stacklevel=3)
        return (math.nan,) * 5
    n4 = math.floor((n + 3) / 2) / 2
    d = np.array([1.0, n4, (n + 1) / 2, n + 1 - n4, float(n)])
    lo = x[np.floor(d).astype(int) - 1]
    hi = x[np.ceil(d).astype(int) - 1]
    return tuple(0.5 * (lo + hi))


@dataclass(frozen=True)
class FiveNumberSummary:
    censored: tuple
    uncensored: tuple


def five_number_summary(plan: SubsamplePlan, status: np.ndarray) -> FiveNumberSummary:
    """Five-number summaries of the plan probabilities, split by event status."""
    status = np.asarray(status)
    if status.shape != plan.probs.shape:
        raise ValueError("status must align with the plan probabilities")
    return FiveNumberSummary(
        censored=_fivenum(plan.probs[status == 0]),
        uncensored=_fivenum(plan.probs[status == 1]),
    )
