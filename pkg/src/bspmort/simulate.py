"""Synthetic surfaces from the generative model.

``gaussian`` mode draws log-rates directly from the state-space model;
``poisson`` mode adds the count layer: log expected rates are Gaussian around
the spline surface and deaths are Poisson given exposure times rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .basis import BasisSet, design_matrix
from .covariance import CorrelationPair
from .data import MortalitySurface
from .errors import DomainError
from .statespace import INITIAL_VARIANCE, GaussianBelief, HyperParams, assemble

GAUSSIAN = "gaussian"
POISSON = "poisson"


def gompertz_levels(basis: BasisSet, infant: float = -4.5, intercept: float = -9.5,
                    slope: float = 0.085) -> np.ndarray:
    """Plausible log-rate spline coefficients: an infant spike then Gompertz growth."""
    levels = intercept + slope * basis.peak_ages
    levels[0] = infant
    return levels


@dataclass(frozen=True)
class SimConfig:
    """Settings for :func:`simulate_surface`.

    ``initial`` defaults to Gompertz-shaped levels, zero slopes and
    instantaneous means, and covariance ``10 I`` (the fitting prior).
    """

    hp: HyperParams
    basis: BasisSet
    correlations: CorrelationPair
    n_years: int
    exposures: float | np.ndarray = 1e5
    rng_seed: int = 0
    mode: str = GAUSSIAN
    initial: GaussianBelief | None = None
    first_year: int = 1933
    lags: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in (GAUSSIAN, POISSON):
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.n_years < 1:
            raise DomainError("n_years must be positive")
        if self.mode == POISSON and np.any(np.asarray(self.exposures) <= 0):
            raise DomainError("exposures must be positive in poisson mode")


def default_initial(basis: BasisSet, variance: float = INITIAL_VARIANCE) -> GaussianBelief:
    m = 3 * basis.p
    mean = np.zeros(m)
    mean[0::3] = gompertz_levels(basis)
    return GaussianBelief(mean, variance * np.eye(m))


def trend_initial(basis: BasisSet, slope: float = -0.015, slope_sd: float = 0.005,
                  inst_sd: float = 1e-4, level_sd: float = 0.0) -> GaussianBelief:
    """Gompertz levels with slowly declining, nearly linear trends.

    The fitting prior (``10 I``) is deliberately vague; drawing slopes and
    instantaneous means from it yields surfaces that curve by hundreds of
    log units over a few decades. This belief keeps simulated panels on a
    demographic scale.
    """
    m = 3 * basis.p
    mean = np.zeros(m)
    mean[0::3] = gompertz_levels(basis)
    mean[1::3] = slope
    sd = np.zeros(m)
    sd[0::3], sd[1::3], sd[2::3] = level_sd, slope_sd, inst_sd
    return GaussianBelief(mean, np.diag(sd ** 2))


def _mvn(rng, mean, cov):
    # eigen-decomposition tolerates singular (e.g. all-zero) covariances
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return mean + V @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(mean.size))


def simulate_states(model, n: int, rng) -> np.ndarray:
    b = _mvn(rng, model.initial_belief.mean, model.initial_belief.cov)
    states = np.empty((n, b.size))
    states[0] = b
    for s in range(1, n):
        b = model.T[s - 1] @ b + _mvn(rng, np.zeros(b.size), model.Q[s - 1])
        states[s] = b
    return states


def simulate_surface(config: SimConfig):
    """Draw a surface and the true states.

    Returns
    -------
    surface : MortalitySurface
    states : ndarray, shape (n_years, 3p)
    """
    rng = np.random.default_rng(config.rng_seed)
    basis = config.basis
    ages = basis.age_grid
    n = config.n_years
    lags = np.ones(n - 1) if config.lags is None else np.asarray(config.lags, dtype=float)
    initial = config.initial or default_initial(basis)
    model = assemble(basis, config.correlations, config.hp, lags, initial=initial,
                     design=design_matrix(basis, ages))
    states = simulate_states(model, n, rng)
    f = states @ model.Z.T
    noise = np.sqrt(config.hp.sigma2_obs) * rng.standard_normal(f.shape)
    years = config.first_year + np.concatenate([[0.0], np.cumsum(lags)]).astype(int)

    if config.mode == GAUSSIAN:
        log_rates = f + noise
        nan = np.full(f.shape, np.nan)
        surface = MortalitySurface(ages.copy(), years, nan, nan.copy(), log_rates,
                                   np.ones(f.shape, dtype=bool), country_code="SIM")
        return surface, states

    expo = np.broadcast_to(np.asarray(config.exposures, dtype=float), f.shape).copy()
    deaths = rng.poisson(expo * np.exp(f + noise)).astype(float)
    ok = deaths > 0
    log_rates = np.where(ok, np.log(np.where(ok, deaths, 1.0) / expo), np.nan)
    surface = MortalitySurface(ages.copy(), years, deaths, expo, log_rates, ok, country_code="SIM")
    return surface, states


def poisson_lognormal_log_rates(f: float, sigma2_obs: float, exposure: float, n_draws: int, rng):
    """Draws of ``log(d / E)`` for one cell; ``-inf`` where ``d = 0``."""
    log_mbar = f + np.sqrt(sigma2_obs) * rng.standard_normal(n_draws)
    d = rng.poisson(exposure * np.exp(log_mbar))
    with np.errstate(divide="ignore"):
        return np.log(d / exposure)


def check_prop1(exposure_levels, n_draws: int = 100_000, f: float = np.log(0.01),
                sigma_obs: float = 0.05, seed: int = 0) -> list[dict]:
    """Kolmogorov-Smirnov distance between simulated ``log(d/E)`` and
    ``N(f, sigma_obs^2)`` at increasing exposures."""
    levels = np.asarray(exposure_levels, dtype=float)
    if np.any(levels <= 0) or np.any(np.diff(levels) <= 0):
        raise DomainError("exposure levels must be positive and increasing")
    rng = np.random.default_rng(seed)
    out = []
    for E in levels:
        x = poisson_lognormal_log_rates(f, sigma_obs ** 2, E, n_draws, rng)
        ks = stats.kstest(x, stats.norm(loc=f, scale=sigma_obs).cdf).statistic
        out.append({"exposure": float(E), "ks_distance": float(ks),
                    "zero_fraction": float(np.mean(~np.isfinite(x)))})
    return out
