import numpy as np
import pytest
from scipy import stats

from bspmort import kalman
from bspmort.errors import InputError
from bspmort.statespace import GaussianBelief, HyperParams, StateSpaceModel, assemble
from oracles import condition, joint_loglik, random_instance


def make_model(Z, H, T, Q, mean0, cov0):
    return StateSpaceModel(Z, H, T, Q, GaussianBelief(mean0, cov0), np.ones(T.shape[0]))


@pytest.mark.parametrize("seed, p, n, k, missing", [(0, 1, 3, 2, 0.0), (1, 2, 4, 3, 0.3),
                                                    (2, 3, 5, 4, 0.5), (3, 1, 8, 1, 0.4),
                                                    (4, 4, 5, 6, 0.0)])
def test_filter_smoother_loglik_match_oracle(seed, p, n, k, missing):
    rng = np.random.default_rng(seed)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, p, n, k, missing)
    model = make_model(Z, H, T, Q, m0, P0)
    fr = kalman.filter(model, y, mask)
    sm = kalman.smooth(model, fr)
    for s in range(n):
        pm, pc = condition(Z, H, T, Q, m0, P0, y, mask, s)
        fm, fc = condition(Z, H, T, Q, m0, P0, y, mask, s + 1)
        np.testing.assert_allclose(fr.pred_mean[s], pm[s], atol=1e-8)
        np.testing.assert_allclose(fr.pred_cov[s], pc[s], atol=1e-8)
        np.testing.assert_allclose(fr.filt_mean[s], fm[s], atol=1e-8)
        np.testing.assert_allclose(fr.filt_cov[s], fc[s], atol=1e-8)
    sm_mean, sm_cov = condition(Z, H, T, Q, m0, P0, y, mask, n)
    np.testing.assert_allclose(sm.mean, sm_mean, atol=1e-8)
    np.testing.assert_allclose(sm.cov, sm_cov, atol=1e-8)
    ref = joint_loglik(Z, H, T, Q, m0, P0, y, mask)
    assert fr.loglik == pytest.approx(ref, abs=1e-8)
    assert kalman.loglik(model, y, mask, method="full") == pytest.approx(ref, abs=1e-8)
    assert kalman.loglik(model, y, mask) == pytest.approx(ref, abs=1e-8)
    assert fr.max_asymmetry < 1e-9


def test_all_missing():
    rng = np.random.default_rng(5)
    Z, H, T, Q, m0, P0, y, _ = random_instance(rng, 2, 4, 3)
    model = make_model(Z, H, T, Q, m0, P0)
    mask = np.zeros(y.shape, dtype=bool)
    fr = kalman.filter(model, np.full(y.shape, np.nan), mask)
    np.testing.assert_array_equal(fr.filt_mean, fr.pred_mean)
    np.testing.assert_array_equal(fr.filt_cov, fr.pred_cov)
    assert fr.loglik == 0.0
    sm = kalman.smooth(model, fr)
    np.testing.assert_allclose(sm.mean, fr.pred_mean, atol=1e-12)
    mean = m0
    for s in range(1, 4):
        mean = T[s - 1] @ mean
        np.testing.assert_allclose(sm.mean[s], mean, atol=1e-12)


def test_predict_is_transition_of_filtered():
    rng = np.random.default_rng(6)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 2, 5, 3, 0.2)
    model = make_model(Z, H, T, Q, m0, P0)
    fr = kalman.filter(model, y, mask)
    for s in range(4):
        np.testing.assert_allclose(fr.pred_mean[s + 1], T[s] @ fr.filt_mean[s], atol=1e-12)
        b = kalman.predict(model, fr.filtered(s), s)
        np.testing.assert_allclose(b.mean, fr.pred_mean[s + 1], atol=1e-12)
        np.testing.assert_allclose(b.cov, fr.pred_cov[s + 1], atol=1e-12)


def test_terminal_smoothed_equals_filtered():
    rng = np.random.default_rng(7)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 3, 6, 4, 0.2)
    model = make_model(Z, H, T, Q, m0, P0)
    fr = kalman.filter(model, y, mask)
    sm = kalman.smooth(model, fr)
    np.testing.assert_allclose(sm.mean[-1], fr.filt_mean[-1], atol=1e-12)
    np.testing.assert_allclose(sm.cov[-1], fr.filt_cov[-1], atol=1e-12)


def test_smoothed_cov_below_predicted():
    rng = np.random.default_rng(8)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 3, 6, 4, 0.3)
    model = make_model(Z, H, T, Q, m0, P0)
    fr = kalman.filter(model, y, mask)
    sm = kalman.smooth(model, fr)
    for s in range(6):
        assert np.linalg.eigvalsh(fr.pred_cov[s] - sm.cov[s]).min() >= -1e-8
        assert np.linalg.eigvalsh(sm.cov[s]).min() >= -1e-8


def test_single_step_loglik():
    Z = np.array([[0.7, 0.0, 0.0]])
    H = np.array([[0.3]])
    m0, P0 = np.array([1.0, 0.5, 0.1]), np.diag([2.0, 1.0, 1.0])
    model = StateSpaceModel(Z, H, np.zeros((0, 3, 3)), np.zeros((0, 3, 3)),
                            GaussianBelief(m0, P0), np.zeros(0))
    ref = stats.norm(0.7, np.sqrt(0.49 * 2 + 0.3)).logpdf(1.4)
    assert kalman.loglik(model, np.array([[1.4]])) == pytest.approx(ref, abs=1e-12)
    assert kalman.filter(model, np.array([[1.4]])).loglik == pytest.approx(ref, abs=1e-12)


def test_independent_datasets_add():
    rng = np.random.default_rng(9)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 1, 4, 2, 0.2)
    _, _, _, _, _, _, y2, mask2 = random_instance(np.random.default_rng(10), 1, 4, 2, 0.2)
    one = make_model(Z, H, T, Q, m0, P0)
    blk = lambda A, B: np.block([[A, np.zeros((A.shape[0], B.shape[1]))],
                                 [np.zeros((B.shape[0], A.shape[1])), B]])
    two = make_model(blk(Z, Z), blk(H, H), np.stack([blk(a, a) for a in T]),
                     np.stack([blk(a, a) for a in Q]), np.concatenate([m0, m0]), blk(P0, P0))
    total = kalman.loglik(two, np.hstack([y, y2]), np.hstack([mask, mask2]), method="full")
    assert total == pytest.approx(kalman.loglik(one, y, mask) + kalman.loglik(one, y2, mask2),
                                  abs=1e-9)


def test_project_to_surface():
    Z = np.array([[1.0, 0, 0, 0.5, 0, 0], [0.0, 0, 0, 1.0, 0, 0]])
    mean = np.arange(6.0)
    cov = np.diag(np.arange(1.0, 7.0))
    b = kalman.project_to_surface(StateSpaceModel(Z, np.eye(2), np.zeros((0, 6, 6)),
                                                  np.zeros((0, 6, 6)), GaussianBelief(mean, cov),
                                                  np.zeros(0)), GaussianBelief(mean, cov))
    np.testing.assert_allclose(b.mean, [1.5, 3.0])
    np.testing.assert_allclose(b.cov, Z @ cov @ Z.T)
    zero = kalman.project_to_surface(StateSpaceModel(Z, np.eye(2), np.zeros((0, 6, 6)),
                                                     np.zeros((0, 6, 6)), GaussianBelief(mean, cov),
                                                     np.zeros(0)),
                                     GaussianBelief(mean, np.zeros((6, 6))))
    np.testing.assert_array_equal(zero.cov, 0)


def test_missing_equals_row_deletion():
    rng = np.random.default_rng(11)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 2, 5, 4, 0.0)
    mask[2, [0, 3]] = False
    y[2, [0, 3]] = np.nan
    full = kalman.filter(make_model(Z, H, T, Q, m0, P0), y, mask)
    # same data, step 2 handled by a model with the rows physically removed
    keep = np.array([1, 2])
    m_pred = full.pred_mean[2]
    P_pred = full.pred_cov[2]
    Zr, Hr = Z[keep], H[np.ix_(keep, keep)]
    F = Zr @ P_pred @ Zr.T + Hr
    K = P_pred @ Zr.T @ np.linalg.inv(F)
    np.testing.assert_allclose(full.filt_mean[2], m_pred + K @ (y[2, keep] - Zr @ m_pred), atol=1e-12)
    np.testing.assert_allclose(full.filt_cov[2], P_pred - K @ Zr @ P_pred, atol=1e-12)


def test_duplicated_then_masked_rows(basis, correlations, rng):
    hp = HyperParams(0.05, 1e-3, 1e-5, 1.0)
    ages = np.arange(0, 101, 10.0)
    model = assemble(basis, correlations, hp, np.ones(5), ages=ages)
    y = rng.normal(-5, 1, size=(6, ages.size))
    dup_ages = np.concatenate([ages, ages[:4]])
    dup = assemble(basis, correlations, hp, np.ones(5), ages=dup_ages,
                   initial=model.initial_belief)
    y2 = np.hstack([y, np.full((6, 4), np.nan)])
    a = kalman.filter(model, y)
    b = kalman.filter(dup, y2)
    np.testing.assert_allclose(a.filt_mean, b.filt_mean, atol=1e-12)
    np.testing.assert_allclose(a.filt_cov, b.filt_cov, atol=1e-12)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-10)
    assert kalman.loglik(dup, y2) == pytest.approx(a.loglik, abs=1e-9)


def test_collapsed_matches_full_on_model(basis, correlations, rng):
    hp = HyperParams(0.02, 1e-4, 1e-6, 0.8)
    model = assemble(basis, correlations, hp, np.ones(11), first_obs=np.linspace(-8, -1, 101))
    y = np.linspace(-8, -1, 101) + 0.1 * rng.normal(size=(12, 101))
    y[rng.uniform(size=y.shape) < 0.1] = np.nan
    full = kalman.loglik(model, y, method="full")
    assert kalman.loglik(model, y, method="collapsed") == pytest.approx(full, rel=1e-10)


def test_input_errors():
    rng = np.random.default_rng(12)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 1, 3, 2)
    model = make_model(Z, H, T, Q, m0, P0)
    bad = y.copy()
    bad[1, 0] = np.inf
    with pytest.raises(InputError):
        kalman.filter(model, bad, np.ones(y.shape, dtype=bool))
    with pytest.raises(InputError):
        kalman.filter(model, y[:, :1])
    with pytest.raises(InputError):
        kalman.filter(model, np.vstack([y, y]))


def test_sampling_matches_smoother():
    rng = np.random.default_rng(13)
    Z, H, T, Q, m0, P0, y, mask = random_instance(rng, 1, 5, 2, 0.2)
    model = make_model(Z, H, T, Q, m0, P0)
    fr = kalman.filter(model, y, mask)
    sm = kalman.smooth(model, fr)
    draws = kalman.sample_smoothing(model, fr, 40000, np.random.default_rng(0), first=1)
    assert draws.shape == (40000, 4, 3)
    np.testing.assert_allclose(draws.mean(axis=0), sm.mean[1:], atol=0.05 * np.sqrt(sm.cov.max()))
    for s in range(4):
        np.testing.assert_allclose(np.cov(draws[:, s].T), sm.cov[s + 1], rtol=0.05, atol=0.02)
