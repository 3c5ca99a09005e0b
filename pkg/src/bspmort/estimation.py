"""Maximum marginal-likelihood estimation of the model parameters.

Parameters are optimized on the log scale by Nelder-Mead from several
Latin-hypercube starts. A weak Gaussian penalty on the log-parameters keeps
the simplex away from the bounds; the reported estimate is the start with
the largest (unpenalized) log-likelihood.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from . import kalman
from .basis import BasisSet, design_matrix
from .covariance import CorrelationPair
from .errors import EstimationError, InputError
from .statespace import HyperParams, assemble, regression_initial_belief

logger = logging.getLogger(__name__)

PARAM_NAMES = ("sigma2_obs", "sigma2_beta", "sigma2_a", "lambda")
DEFAULT_LOG_BOUNDS = ((-20.0, 5.0), (-20.0, 5.0), (-20.0, 5.0), (-5.0, 5.0))


@dataclass(frozen=True)
class FitConfig:
    n_starts: int = 10
    max_iters: int = 500
    penalty_strength: float = 1.0
    penalty_sd: float = 10.0
    log_bounds: tuple = DEFAULT_LOG_BOUNDS
    rng_seed: int = 0
    xatol: float = 1e-4
    fatol: float = 1e-4

    def __post_init__(self):
        if self.n_starts < 1:
            raise InputError("n_starts must be at least 1")
        if self.max_iters < 1:
            raise InputError("max_iters must be at least 1")
        if self.penalty_strength < 0:
            raise InputError("penalty_strength must be nonnegative")
        b = np.asarray(self.log_bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
            raise InputError("log_bounds must be finite (low, high) pairs with low < high")

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.log_bounds, dtype=float)

    def to_dict(self):
        return {"n_starts": self.n_starts, "max_iters": self.max_iters,
                "penalty_strength": self.penalty_strength, "penalty_sd": self.penalty_sd,
                "log_bounds": [list(b) for b in self.log_bounds], "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "log_bounds" in d:
            d["log_bounds"] = tuple(tuple(float(x) for x in b) for b in d["log_bounds"])
        return cls(**d)


@dataclass
class StartTrace:
    start: np.ndarray
    optimum: np.ndarray
    loglik: float
    objective: float
    start_objective: float
    iterations: int
    converged: bool


@dataclass
class FitResult:
    best: HyperParams
    best_loglik: float
    trace: list = field(default_factory=list)
    best_index: int = 0

    def to_dict(self):
        return {
            "parameters": self.best.to_dict(),
            "log_parameters": dict(zip(PARAM_NAMES, map(float, self.best.to_log()))),
            "best_loglik": self.best_loglik,
            "best_start": self.best_index,
            "trace": [{"start": list(map(float, t.start)), "optimum": list(map(float, t.optimum)),
                       "loglik": t.loglik, "objective": t.objective,
                       "iterations": t.iterations, "converged": t.converged}
                      for t in self.trace],
        }


def latin_hypercube_starts(bounds, n: int, seed: int) -> np.ndarray:
    sampler = qmc.LatinHypercube(d=len(bounds), seed=np.random.default_rng(seed))
    return qmc.scale(sampler.random(n), bounds[:, 0], bounds[:, 1])


def gaussian_log_penalty(theta, bounds, strength: float, sd: float) -> float:
    """Log of an unnormalized Gaussian centered at the middle of the bounds box."""
    if strength == 0:
        return 0.0
    center = bounds.mean(axis=1)
    return -0.5 * strength * float(np.sum(((np.asarray(theta) - center) / sd) ** 2))


def multistart_maximize(loglik_fn, config: FitConfig, n_params=None):
    """Maximize ``loglik_fn(theta)`` (log-space parameters) from several starts.

    Returns ``(best_index, traces)``; raises :class:`EstimationError` when no
    start reaches a finite likelihood.
    """
    bounds = config.bounds
    if n_params is not None and bounds.shape[0] != n_params:
        raise InputError(f"need {n_params} bounds, got {bounds.shape[0]}")
    starts = latin_hypercube_starts(bounds, config.n_starts, config.rng_seed)

    def objective(theta):
        try:
            ll = loglik_fn(theta)
        except (np.linalg.LinAlgError, ArithmeticError, FloatingPointError):
            return np.inf
        if not np.isfinite(ll):
            return np.inf
        return -(ll + gaussian_log_penalty(theta, bounds, config.penalty_strength, config.penalty_sd))

    def run(x0):
        f0 = objective(x0)
        res = optimize.minimize(
            objective, x0, method="Nelder-Mead", bounds=bounds,
            options={"maxiter": config.max_iters, "xatol": config.xatol, "fatol": config.fatol})
        x = np.asarray(res.x)
        if res.fun > f0:
            x = np.asarray(x0)
        try:
            ll = float(loglik_fn(x))
        except (np.linalg.LinAlgError, ArithmeticError):
            ll = -np.inf
        return StartTrace(np.asarray(x0), x, ll, float(min(res.fun, f0)), float(f0),
                          int(res.nit), bool(res.success))

    workers = _worker_count()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            traces = list(ex.map(run, starts))
    else:
        traces = [run(x0) for x0 in starts]

    finite = [i for i, t in enumerate(traces) if np.isfinite(t.loglik)]
    if not finite:
        raise EstimationError("no start produced a finite log-likelihood")
    best = max(finite, key=lambda i: (traces[i].loglik, -i))
    return best, traces


def _worker_count():
    try:
        return max(1, int(os.environ.get("BSP_THREADS", "1")))
    except ValueError:
        return 1


class LikelihoodSurface:
    """Log-likelihood of a surface as a function of the log-parameters.

    Everything that does not depend on the parameters (design matrix,
    initial belief, observation mask) is computed once.
    """

    def __init__(self, y, basis: BasisSet, correlations: CorrelationPair, lags=None,
                 ages=None, mask=None):
        y = np.asarray(y, dtype=float)
        if y.ndim != 2 or y.shape[0] < 2:
            raise InputError("need at least 2 time points to estimate parameters")
        self.y = y
        self.mask = np.isfinite(y) if mask is None else np.asarray(mask, dtype=bool)
        self.basis = basis
        self.correlations = correlations
        self.ages = basis.age_grid if ages is None else np.asarray(ages, dtype=float)
        self.design = design_matrix(basis, self.ages)
        if self.design.shape[0] != y.shape[1]:
            raise InputError(f"surface has {y.shape[1]} ages, basis grid has {self.design.shape[0]}")
        self.lags = np.ones(y.shape[0] - 1) if lags is None else np.asarray(lags, dtype=float)
        if self.lags.size != y.shape[0] - 1:
            raise InputError("need one lag per consecutive pair of years")
        first = np.flatnonzero(self.mask.any(axis=1))
        if first.size == 0:
            raise InputError("surface has no observed cells")
        y0 = np.where(self.mask[first[0]], y[first[0]], np.nan)
        self.initial = regression_initial_belief(self.design, y0, self.mask[first[0]])

    def model(self, hp: HyperParams):
        return assemble(self.basis, self.correlations, hp, self.lags, initial=self.initial,
                        design=self.design)

    def __call__(self, theta) -> float:
        return kalman.loglik(self.model(HyperParams.from_log(theta)), self.y, self.mask)


def fit(surface, basis: BasisSet, correlations: CorrelationPair,
        config: FitConfig | None = None, lags=None) -> FitResult:
    """Estimate the model parameters for one surface.

    ``surface`` is a :class:`~bspmort.data.MortalitySurface` or an
    ``(n_years, n_ages)`` array of log-rates with NaN for missing cells.
    """
    config = config or FitConfig()
    y, mask, ages, lags = _unpack(surface, lags)
    ll = LikelihoodSurface(y, basis, correlations, lags=lags, ages=ages, mask=mask)
    best, traces = multistart_maximize(ll, config, n_params=4)
    t = traces[best]
    logger.info("fit: best start %d, loglik %.4f", best, t.loglik)
    return FitResult(HyperParams.from_log(t.optimum), t.loglik, traces, best)


def _unpack(surface, lags):
    if hasattr(surface, "log_rates"):
        y = np.where(surface.observed, surface.log_rates, np.nan)
        if lags is None:
            lags = np.diff(np.asarray(surface.years, dtype=float))
        return y, surface.observed, np.asarray(surface.ages, dtype=float), lags
    y = np.asarray(surface, dtype=float)
    return y, np.isfinite(y), None, lags
