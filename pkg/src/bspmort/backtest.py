"""Rolling-origin backtests: median absolute error and 95% coverage by horizon.

For every surface and origin the surface is truncated at the origin year,
a forecaster is fitted on the truncated history, and its forecasts are
scored against the held-out observed log-rates. Errors are pooled over
surfaces, ages and origins for each horizon.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kalman
from .basis import BasisSet, design_matrix
from .covariance import CorrelationPair
from .data import MortalitySurface
from .errors import BSPError, InputError
from .estimation import FitConfig, _worker_count, fit
from .forecast import DEFAULT_DRAWS, DEFAULT_WINDOW, ForecastResult, Z95, build_drift_model, forecast
from .statespace import HyperParams, assemble, regression_initial_belief

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BacktestSpec:
    origins: tuple = tuple(range(1990, 2011))
    horizons: int = 10

    def __post_init__(self):
        if self.horizons < 1:
            raise InputError("horizons must be at least 1")
        if len(self.origins) == 0:
            raise InputError("need at least one origin")

    def to_dict(self):
        return {"origins": [int(o) for o in self.origins], "horizons": int(self.horizons)}


@dataclass
class BacktestReport:
    """Pooled metrics per horizon plus the raw errors behind them.

    ``per_horizon`` has one dict per horizon with keys ``horizon``,
    ``n_cells``, ``median_abs_error``, ``q1``, ``q3`` and ``coverage95``.
    ``errors`` and ``covered`` map ``(label, origin, horizon)`` to per-age
    arrays over the scored cells. ``skips`` lists what could not be scored.
    """

    spec: BacktestSpec
    per_horizon: list
    errors: dict = field(default_factory=dict)
    covered: dict = field(default_factory=dict)
    skips: list = field(default_factory=list)

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "per_horizon": self.per_horizon,
            "skips": self.skips,
            "errors": [{"surface": k[0], "origin": k[1], "horizon": k[2],
                        "abs_errors": [float(x) for x in v]}
                       for k, v in self.errors.items()],
        }


def surface_label(surface: MortalitySurface) -> str:
    return f"{surface.country_code or 'surface'}:{surface.gender}"


# forecasters ---------------------------------------------------------------

class BSPForecaster:
    """Fit the B-spline process, then forecast with the drift layer.

    When ``hp`` is given the parameter fit is skipped and ``hp`` is used as is
    (useful for correctly specified synthetic checks).
    """

    def __init__(self, basis: BasisSet, correlations: CorrelationPair,
                 fit_config: FitConfig | None = None, window: int = DEFAULT_WINDOW,
                 n_draws: int = DEFAULT_DRAWS, seed: int = 0, hp: HyperParams | None = None):
        self.basis = basis
        self.correlations = correlations
        self.fit_config = fit_config or FitConfig(rng_seed=seed)
        self.window = window
        self.n_draws = n_draws
        self.seed = seed
        self.hp = hp

    def min_years(self) -> int:
        return 2 * self.window

    def __call__(self, train: MortalitySurface, horizons: int, lags=None) -> ForecastResult:
        ages = np.asarray(train.ages, dtype=float)
        design = design_matrix(self.basis, ages)
        y = train.observations()
        mask = train.observed
        hp = self.hp or fit(train, self.basis, self.correlations, self.fit_config).best
        first = np.flatnonzero(mask.any(axis=1))[0]
        initial = regression_initial_belief(design, np.where(mask[first], y[first], np.nan),
                                            mask[first])
        model = assemble(self.basis, self.correlations, hp,
                         np.diff(np.asarray(train.years, dtype=float)),
                         initial=initial, design=design)
        fr = kalman.filter(model, y, mask)
        sm = kalman.smooth(model, fr)
        drift = build_drift_model(model, y, fr, sm, self.correlations, hp, window=self.window,
                                  mask=mask, n_draws=self.n_draws, seed=self.seed)
        return forecast(drift, design, horizons, lags)


def naive_forecaster(train: MortalitySurface, horizons: int, lags=None) -> ForecastResult:
    """Freeze the last observed log-rate per age; random-walk intervals.

    The per-age step variance is the mean squared first difference of the
    observed history. Ages never observed forecast NaN.
    """
    y = train.observations()
    k = y.shape[1]
    last = np.full(k, np.nan)
    for j in range(k):
        seen = np.flatnonzero(np.isfinite(y[:, j]))
        if seen.size:
            last[j] = y[seen[-1], j]
    with np.errstate(invalid="ignore"):
        d = np.diff(y, axis=0)
        step_var = np.array([np.mean(c[np.isfinite(c)] ** 2) if np.isfinite(c).any() else np.nan
                             for c in d.T])
    h = np.arange(1, horizons + 1)[:, None]
    point = np.broadcast_to(last, (horizons, k)).copy()
    sd = np.sqrt(h * step_var)
    return ForecastResult(h.ravel(), point, point - Z95 * sd, point + Z95 * sd, sd,
                          np.empty((horizons, 0)), np.empty((horizons, 0, 0)))


# driver --------------------------------------------------------------------

def _score(surface, label, origin, spec, forecaster, min_years):
    years = np.asarray(surface.years)
    if origin not in set(years.tolist()):
        return [], [{"surface": label, "origin": int(origin), "horizon": None,
                     "reason": "origin year not in data"}]
    train = surface.select_years(last=origin)
    if train.n_years < min_years:
        return [], [{"surface": label, "origin": int(origin), "horizon": None,
                     "reason": f"history has {train.n_years} years, need {min_years}"}]
    horizons = spec.horizons
    future = origin + np.arange(1, horizons + 1)
    try:
        fc = forecaster(train, horizons, np.ones(horizons))
    except BSPError as exc:
        return [], [{"surface": label, "origin": int(origin), "horizon": None,
                     "reason": f"forecaster failed: {exc}"}]
    y = surface.observations()
    rows, skips = [], []
    for h, year in enumerate(future, start=1):
        idx = np.flatnonzero(years == year)
        if idx.size == 0:
            skips.append({"surface": label, "origin": int(origin), "horizon": h,
                          "reason": f"year {int(year)} not in data"})
            continue
        obs = y[idx[0]]
        ok = np.isfinite(obs) & np.isfinite(fc.point[h - 1])
        n_missing = int(obs.size - ok.sum())
        if n_missing:
            skips.append({"surface": label, "origin": int(origin), "horizon": h,
                          "reason": f"{n_missing} held-out cells missing"})
        err = np.abs(fc.point[h - 1, ok] - obs[ok])
        inside = (fc.lower[h - 1, ok] <= obs[ok]) & (obs[ok] <= fc.upper[h - 1, ok])
        rows.append(((label, int(origin), h), err, inside))
    return rows, skips


def _metrics(h, errs, covs):
    if errs.size == 0:
        return {"horizon": h, "n_cells": 0, "median_abs_error": None, "q1": None, "q3": None,
                "coverage95": None}
    q1, med, q3 = np.quantile(errs, [0.25, 0.5, 0.75])
    return {"horizon": h, "n_cells": int(errs.size), "median_abs_error": float(med),
            "q1": float(q1), "q3": float(q3), "coverage95": float(np.mean(covs))}


def run_backtest(surfaces, spec: BacktestSpec | None = None, forecaster=None,
                 min_years: int | None = None) -> BacktestReport:
    """Score ``forecaster`` on every (surface, origin) pair.

    ``forecaster(train_surface, horizons, lags)`` returns a
    :class:`~bspmort.forecast.ForecastResult` over the same ages as the
    surface. Tasks run on ``BSP_THREADS`` worker threads; results are
    assembled in input order so the report does not depend on scheduling.
    """
    spec = spec or BacktestSpec()
    if forecaster is None:
        raise InputError("a forecaster is required")
    if isinstance(surfaces, MortalitySurface):
        surfaces = [surfaces]
    if min_years is None:
        min_years = forecaster.min_years() if hasattr(forecaster, "min_years") else 2
    labels = [surface_label(s) for s in surfaces]
    labels = [f"{lab}#{i}" if labels.count(lab) > 1 else lab for i, lab in enumerate(labels)]
    tasks = [(s, lab, int(o)) for s, lab in zip(surfaces, labels) for o in spec.origins]
    run = lambda t: _score(*t, spec, forecaster, min_years)
    workers = _worker_count()
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    errors, covered, skips = {}, {}, []
    for rows, sk in results:
        skips.extend(sk)
        for key, err, inside in rows:
            errors[key] = err
            covered[key] = inside
    per_horizon = []
    for h in range(1, spec.horizons + 1):
        keys = [k for k in errors if k[2] == h]
        e = np.concatenate([errors[k] for k in keys]) if keys else np.empty(0)
        c = np.concatenate([covered[k] for k in keys]) if keys else np.empty(0, dtype=bool)
        per_horizon.append(_metrics(h, e, c))
    for s in skips:
        logger.warning("backtest skip: %s", s)
    return BacktestReport(spec, per_horizon, errors, covered, skips)
