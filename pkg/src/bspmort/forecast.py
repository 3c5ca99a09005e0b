"""Random-walk-plus-drift forecasts of the spline coefficients.

Coefficients are projected as ``beta_{h+1} = beta_h + lam * delta_h * Delta_h + omega``
with a slowly varying drift ``Delta_{h+1} = Delta_h + eps``. The walk starts
from the smoothed coefficients at the last year; the drift starts from the
median smoothed slope over the last ``window`` years, which makes it robust to
isolated shocks. The three variances (walk, drift, observation) are estimated
by maximum likelihood on the last ``window`` years.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kalman
from .covariance import CorrelationPair
from .errors import InputError
from .estimation import FitConfig, multistart_maximize
from .statespace import GaussianBelief, HyperParams, StateSpaceModel

logger = logging.getLogger(__name__)

Z95 = 1.959964
DEFAULT_WINDOW = 25
DEFAULT_DRAWS = 200
WINDOW_FIT = FitConfig(n_starts=4, log_bounds=((-20.0, 5.0),) * 3)


@dataclass(frozen=True)
class DriftModel:
    """Fitted random walk plus drift for the ``p`` coefficients.

    ``start_cov`` is the ``2p x 2p`` covariance of ``(beta, Delta)`` at the
    last observed year, taken from the window fit.
    """

    beta_start: np.ndarray
    drift_start: np.ndarray
    W: np.ndarray
    sigma2_omega: float
    sigma2_delta: float
    sigma2_psi: float
    lambda_hat: float
    start_cov: np.ndarray
    window: int = DEFAULT_WINDOW
    window_loglik: float = float("nan")
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def p(self) -> int:
        return self.beta_start.size


@dataclass(frozen=True)
class ForecastResult:
    """Forecasts at horizons ``1..H``; arrays are indexed ``[h - 1, ...]``."""

    horizons: np.ndarray
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sd: np.ndarray
    coef_mean: np.ndarray
    coef_cov: np.ndarray


def median_slopes(smoothed_mean: np.ndarray, stop: int, window: int) -> np.ndarray:
    """Per-spline median of smoothed slopes over steps ``stop - window .. stop - 1``."""
    if stop - window < 0:
        raise InputError(f"need {window} years before step {stop}")
    return np.median(smoothed_mean[stop - window:stop, 1::3], axis=0)


def drift_window_model(design, rho_beta, lambda_hat, lags, sigma2_omega, sigma2_delta,
                       sigma2_psi, initial: GaussianBelief) -> StateSpaceModel:
    """State ``(beta, Delta)`` of dimension ``2p`` observed through the spline matrix."""
    k, p = design.shape
    Z = np.hstack([design, np.zeros((k, p))])
    I = np.eye(p)
    lags = np.asarray(lags, dtype=float)
    T = np.empty((lags.size, 2 * p, 2 * p))
    for s, d in enumerate(lags):
        T[s] = np.block([[I, lambda_hat * d * I], [np.zeros((p, p)), I]])
    Qs = np.block([[sigma2_omega * rho_beta, np.zeros((p, p))],
                   [np.zeros((p, p)), sigma2_delta * I]])
    Q = np.broadcast_to(Qs, (lags.size, 2 * p, 2 * p))
    return StateSpaceModel(Z=Z, H=sigma2_psi * np.eye(k), T=T, Q=Q,
                           initial_belief=initial, time_lags=lags)


def build_drift_model(model: StateSpaceModel, y, fr: kalman.FilterResult,
                      smoothed: kalman.SmootherResult, correlations: CorrelationPair,
                      hp: HyperParams, window: int = DEFAULT_WINDOW, mask=None,
                      n_draws: int = DEFAULT_DRAWS, seed: int = 0,
                      fit_config: FitConfig | None = None) -> DriftModel:
    """Set up and fit the random-walk-plus-drift layer.

    Parameters
    ----------
    model, y, fr, smoothed
        The fitted state-space model, its observations (``(n, k)``, NaN for
        missing), and the filter and smoother output.
    correlations, hp
        Cross-spline correlations and the fitted parameters; ``hp.lam`` is
        kept fixed.
    window : int
        Years used for the drift median and for the variance fit; the series
        must be at least ``2 * window`` long.
    n_draws : int
        Joint smoothing draws used for the variance of the initial drift.
    """
    y, mask = kalman.prepare_observations(model, y, mask)
    n = smoothed.n
    if window < 1:
        raise InputError("window must be positive")
    if n < 2 * window:
        raise InputError(f"series has {n} years; the drift model needs at least {2 * window}")
    if y.shape[0] != n:
        raise InputError("observations and smoother lengths differ")
    design = model.Z[:, 0::3]
    p = design.shape[1]
    lags = model.time_lags
    lam = hp.lam

    beta_start = smoothed.mean[n - 1, 0::3].copy()
    drift_start = median_slopes(smoothed.mean, n, window)

    # initial law of (beta, Delta) at the first window year
    w0 = n - window
    mu_delta = median_slopes(smoothed.mean, w0, window)
    rng = np.random.default_rng(seed)
    draws = kalman.sample_smoothing(model, fr, n_draws, rng, first=w0 - window)
    draw_medians = np.median(draws[:, :window, 1::3], axis=1)
    var_delta = np.var(draw_medians, axis=0, ddof=1)
    beta0 = smoothed.mean[w0 - 1, 0::3] + lam * lags[w0 - 1] * mu_delta
    cov_beta0 = fr.pred_cov[w0][0::3, 0::3]
    initial = GaussianBelief(
        np.concatenate([beta0, mu_delta]),
        np.block([[cov_beta0, np.zeros((p, p))],
                  [np.zeros((p, p)), np.diag(np.maximum(var_delta, 1e-300))]]))

    y_win, m_win = y[w0:], mask[w0:]
    win_lags = lags[w0:n - 1]
    rho = correlations.rho_beta

    def window_model(theta):
        s2o, s2d, s2p = np.exp(theta)
        return drift_window_model(design, rho, lam, win_lags, s2o, s2d, s2p, initial)

    def loglik(theta):
        return kalman.loglik(window_model(theta), y_win, m_win)

    config = fit_config or WINDOW_FIT
    best, traces = multistart_maximize(loglik, config, n_params=3)
    theta = traces[best].optimum
    s2o, s2d, s2p = map(float, np.exp(theta))
    wfr = kalman.filter(window_model(theta), y_win, m_win)
    logger.info("drift model: sigma2_omega=%.3g sigma2_delta=%.3g sigma2_psi=%.3g",
                s2o, s2d, s2p)
    return DriftModel(beta_start=beta_start, drift_start=drift_start, W=s2o * rho,
                      sigma2_omega=s2o, sigma2_delta=s2d, sigma2_psi=s2p, lambda_hat=lam,
                      start_cov=wfr.filt_cov[-1], window=window,
                      window_loglik=traces[best].loglik,
                      extras={"mu_delta": mu_delta, "var_delta": var_delta,
                              "initial": initial,
                              "variance_steps": (w0, n - 1),
                              "drift_init_steps": (w0 - window, w0 - 1)})


def forecast(drift: DriftModel, design: np.ndarray, horizons: int, lags=None) -> ForecastResult:
    """Point forecasts and 95% intervals for log-rates at horizons ``1..horizons``.

    ``design`` is the ``k x p`` spline matrix of the forecast ages, or a
    :class:`~bspmort.basis.BasisSet` (its age grid is used); ``lags`` are the
    reference-scale steps between consecutive forecast years (default 1).
    """
    if horizons < 1:
        raise InputError("horizons must be at least 1")
    if hasattr(design, "design"):
        design = design.design()
    design = np.asarray(design, dtype=float)
    p = drift.p
    if design.shape[1] != p:
        raise InputError(f"design needs {p} columns")
    lags = np.ones(horizons) if lags is None else np.asarray(lags, dtype=float)
    if lags.size < horizons:
        raise InputError("need one lag per horizon")
    I = np.eye(p)
    Qs = np.block([[drift.W, np.zeros((p, p))], [np.zeros((p, p)), drift.sigma2_delta * I]])
    mean = np.concatenate([drift.beta_start, drift.drift_start])
    cov = np.array(drift.start_cov, dtype=float)
    coef_mean = np.empty((horizons, p))
    coef_cov = np.empty((horizons, p, p))
    for h in range(horizons):
        A = np.block([[I, drift.lambda_hat * lags[h] * I], [np.zeros((p, p)), I]])
        mean = A @ mean
        cov = A @ cov @ A.T + Qs
        cov = 0.5 * (cov + cov.T)
        coef_mean[h] = mean[:p]
        coef_cov[h] = cov[:p, :p]
    point = coef_mean @ design.T
    var = np.einsum("ij,hjk,ik->hi", design, coef_cov, design) + drift.sigma2_psi
    sd = np.sqrt(np.maximum(var, 0.0))
    return ForecastResult(np.arange(1, horizons + 1), point, point - Z95 * sd,
                          point + Z95 * sd, sd, coef_mean, coef_cov)


def predictive_forecast(fr: kalman.FilterResult, hp: HyperParams,
                        correlations: CorrelationPair, design: np.ndarray, horizons: int,
                        lags=None) -> ForecastResult:
    """Forecasts from the model's own multi-step predictive law (comparison mode)."""
    from .statespace import process_noise, transition_matrix

    p = design.shape[1]
    lags = np.ones(horizons) if lags is None else np.asarray(lags, dtype=float)
    a, P = fr.filt_mean[-1], fr.filt_cov[-1]
    coef_mean = np.empty((horizons, p))
    coef_cov = np.empty((horizons, p, p))
    for h in range(horizons):
        Tm = transition_matrix(p, hp.lam, lags[h])
        a = Tm @ a
        P = Tm @ P @ Tm.T + process_noise(hp, correlations, lags[h])
        coef_mean[h] = a[0::3]
        coef_cov[h] = P[0::3, 0::3]
    point = coef_mean @ design.T
    var = np.einsum("ij,hjk,ik->hi", design, coef_cov, design) + hp.sigma2_obs
    sd = np.sqrt(var)
    return ForecastResult(np.arange(1, horizons + 1), point, point - Z95 * sd,
                          point + Z95 * sd, sd, coef_mean, coef_cov)
