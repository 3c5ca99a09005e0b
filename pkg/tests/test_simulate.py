import numpy as np
import pytest

from bspmort import kalman
from bspmort.errors import DomainError
from bspmort.estimation import LikelihoodSurface
from bspmort.simulate import (GAUSSIAN, POISSON, SimConfig, check_prop1, default_initial,
                              simulate_states, simulate_surface, trend_initial)
from bspmort.statespace import GaussianBelief, HyperParams, assemble


def test_noiseless_system_is_constant(basis, correlations):
    init = default_initial(basis)
    init = GaussianBelief(init.mean, np.zeros_like(init.cov))
    surf, states = simulate_surface(SimConfig(HyperParams(0.0, 0.0, 0.0, 1.0), basis,
                                              correlations, 12, initial=init))
    np.testing.assert_array_equal(states, np.broadcast_to(init.mean, states.shape))
    G = basis.design()
    np.testing.assert_allclose(surf.log_rates, np.broadcast_to(G @ init.mean[0::3], (12, 101)),
                               atol=1e-13)


def test_seeded_reproducible(basis, correlations):
    cfg = SimConfig(HyperParams(0.01, 1e-5, 1e-8, 1.0), basis, correlations, 20, rng_seed=7)
    a, sa = simulate_surface(cfg)
    b, sb = simulate_surface(cfg)
    assert a.log_rates.tobytes() == b.log_rates.tobytes()
    assert sa.tobytes() == sb.tobytes()
    c, _ = simulate_surface(SimConfig(cfg.hp, basis, correlations, 20, rng_seed=8))
    assert not np.array_equal(a.log_rates, c.log_rates)


def test_gaussian_mode_shapes(basis, correlations):
    surf, states = simulate_surface(SimConfig(HyperParams(0.01, 1e-5, 1e-8, 1.0), basis,
                                              correlations, 5, first_year=2000))
    assert states.shape == (5, 60)
    np.testing.assert_array_equal(surf.years, np.arange(2000, 2005))
    assert surf.observed.all() and np.isnan(surf.deaths).all()


def test_poisson_large_exposure_concentrates(basis, correlations):
    init = GaussianBelief(np.tile([np.log(0.1), 0.0, 0.0], basis.p), np.zeros((60, 60)))
    cfg = SimConfig(HyperParams(0.0, 0.0, 0.0, 1.0), basis, correlations, 100, exposures=1e6,
                    mode=POISSON, initial=init, rng_seed=1)
    surf, _ = simulate_surface(cfg)
    assert surf.observed.size >= 10_000
    close = np.abs(surf.log_rates - np.log(0.1)) < 0.01
    assert close.mean() >= 0.99


def test_poisson_zero_counts_missing(basis, correlations):
    init = GaussianBelief(np.tile([np.log(1e-6), 0.0, 0.0], basis.p), np.zeros((60, 60)))
    surf, _ = simulate_surface(SimConfig(HyperParams(0.0, 0.0, 0.0, 1.0), basis, correlations, 3,
                                         exposures=100.0, mode=POISSON, initial=init))
    assert not surf.observed.any()
    assert np.all(surf.deaths == 0)


def test_config_errors(basis, correlations):
    hp = HyperParams(0.01, 1e-5, 1e-8, 1.0)
    with pytest.raises(DomainError):
        SimConfig(hp, basis, correlations, 5, mode="binomial")
    with pytest.raises(DomainError):
        SimConfig(hp, basis, correlations, 0)
    with pytest.raises(DomainError):
        SimConfig(hp, basis, correlations, 5, exposures=0.0, mode=POISSON)


def test_increment_covariance_converges(basis, correlations):
    hp = HyperParams(1.0, 1.0, 1.0, 1.0)
    model = assemble(basis, correlations, hp, np.ones(10_000), first_obs=np.zeros(101))
    states = simulate_states(model, 10_001, np.random.default_rng(3))
    inc = states[1:] - states[:-1] @ model.T[0].T
    Qhat = inc.T @ inc / inc.shape[0]
    assert np.linalg.norm(Qhat - model.Q[0]) / np.linalg.norm(model.Q[0]) < 0.1


def test_true_parameters_rank_high(basis, correlations):
    hp = HyperParams(0.01, 1e-5, 1e-8, 1.0)
    surf, _ = simulate_surface(SimConfig(hp, basis, correlations, 20, rng_seed=2,
                                         initial=trend_initial(basis)))
    ll = LikelihoodSurface(surf.observations(), basis, correlations)
    rng = np.random.default_rng(0)
    cloud = np.column_stack([rng.uniform(-20, 5, (100, 3)), rng.uniform(-5, 5, 100)])
    values = np.array([ll(th) for th in cloud])
    assert ll(hp.to_log()) >= np.quantile(values, 0.9)


def test_prop1_small():
    res = check_prop1([1e2, 1e4, 1e6], n_draws=20_000, seed=1)
    ks = [r["ks_distance"] for r in res]
    assert ks[0] > ks[1] > ks[2]
    assert res[0]["zero_fraction"] > 0 and res[2]["zero_fraction"] == 0


def test_prop1_degenerate_limit():
    res = check_prop1([1e9], n_draws=5000, sigma_obs=1e-9, seed=0)
    # both noise sources vanish: all draws sit at f
    from bspmort.simulate import poisson_lognormal_log_rates
    x = poisson_lognormal_log_rates(np.log(0.01), 1e-18, 1e12, 1000, np.random.default_rng(0))
    assert np.abs(x - np.log(0.01)).max() < 1e-4
    assert res[0]["zero_fraction"] == 0


def test_prop1_rejects_unsorted():
    with pytest.raises(DomainError):
        check_prop1([1e4, 1e2])
