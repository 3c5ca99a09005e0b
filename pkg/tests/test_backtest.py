import numpy as np
import pytest

from bspmort.backtest import BacktestSpec, BSPForecaster, naive_forecaster, run_backtest
from bspmort.data import MortalitySurface
from bspmort.errors import InputError
from bspmort.forecast import ForecastResult
from bspmort.simulate import SimConfig, simulate_surface, trend_initial
from bspmort.statespace import HyperParams

HP = HyperParams(0.0025, 1e-7, 1e-10, 1.0)


@pytest.fixture(scope="module")
def panel(basis, correlations):
    surf, _ = simulate_surface(SimConfig(HP, basis, correlations, 62, rng_seed=5, first_year=1950,
                                         initial=trend_initial(basis, slope=-0.03, slope_sd=0.01)))
    return surf


def oracle_forecaster(truth):
    """Returns the held-out observations themselves."""
    def fc(train, horizons, lags=None):
        last = int(train.years[-1])
        y = truth.observations()
        rows = [y[np.flatnonzero(truth.years == last + h)[0]] if last + h in truth.years
                else np.full(y.shape[1], np.nan) for h in range(1, horizons + 1)]
        pt = np.array(rows)
        return ForecastResult(np.arange(1, horizons + 1), pt, pt, pt, np.zeros_like(pt),
                              np.empty((horizons, 0)), np.empty((horizons, 0, 0)))
    return fc


def test_perfect_forecasts(panel):
    rep = run_backtest([panel], BacktestSpec(origins=(2000, 2001, 2002), horizons=3),
                       oracle_forecaster(panel))
    for r in rep.per_horizon:
        assert r["median_abs_error"] == 0.0 and r["coverage95"] == 1.0
        assert r["n_cells"] == 3 * 101


def test_pooled_median_and_quartiles(panel):
    spec = BacktestSpec(origins=(2005, 2006), horizons=2)
    rep = run_backtest([panel, panel], spec, naive_forecaster)
    for r in rep.per_horizon:
        errs = np.concatenate([v for k, v in rep.errors.items() if k[2] == r["horizon"]])
        assert r["median_abs_error"] == np.median(errs)
        assert r["q1"] <= r["median_abs_error"] <= r["q3"]
        assert 0 <= r["coverage95"] <= 1
        assert r["n_cells"] == errs.size == 4 * 101


def test_skips_recorded(panel):
    rep = run_backtest([panel], BacktestSpec(origins=(1960, 2010, 2030), horizons=2),
                       naive_forecaster, min_years=20)
    reasons = {(s["origin"], s["horizon"]): s["reason"] for s in rep.skips}
    assert "need 20" in reasons[(1960, None)]
    assert "not in data" in reasons[(2030, None)]
    assert "2012" in reasons[(2010, 2)]
    assert rep.per_horizon[0]["n_cells"] == 101
    assert rep.per_horizon[1]["n_cells"] == 0


def test_missing_held_out_cells_excluded(panel):
    obs = panel.observed.copy()
    i = np.flatnonzero(panel.years == 2006)[0]
    obs[i, :30] = False
    holey = MortalitySurface(panel.ages, panel.years, panel.deaths, panel.exposures,
                             panel.log_rates, obs, country_code="HOLE")
    rep = run_backtest([holey], BacktestSpec(origins=(2005,), horizons=1), naive_forecaster)
    assert rep.per_horizon[0]["n_cells"] == 71
    assert any("30 held-out cells missing" in s["reason"] for s in rep.skips)


def test_bsp_beats_naive_on_trend(panel, basis, correlations):
    spec = BacktestSpec(origins=(2005, 2008), horizons=3)
    bsp = run_backtest([panel], spec, BSPForecaster(basis, correlations, hp=HP))
    naive = run_backtest([panel], spec, naive_forecaster)
    for b, n in zip(bsp.per_horizon, naive.per_horizon):
        assert b["median_abs_error"] < n["median_abs_error"]


def test_deterministic(panel, basis, correlations):
    spec = BacktestSpec(origins=(2009,), horizons=2)
    fc = BSPForecaster(basis, correlations, hp=HP, seed=3)
    a = run_backtest([panel], spec, fc).to_dict()
    b = run_backtest([panel], spec, fc).to_dict()
    assert a == b


def test_threads_do_not_change_report(panel, monkeypatch):
    spec = BacktestSpec(origins=(2000, 2003, 2006), horizons=2)
    a = run_backtest([panel], spec, naive_forecaster).to_dict()
    monkeypatch.setenv("BSP_THREADS", "3")
    assert run_backtest([panel], spec, naive_forecaster).to_dict() == a


def test_spec_errors():
    with pytest.raises(InputError):
        BacktestSpec(horizons=0)
    with pytest.raises(InputError):
        BacktestSpec(origins=())
    with pytest.raises(InputError):
        run_backtest([], BacktestSpec())
