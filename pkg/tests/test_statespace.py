import numpy as np
import pytest
from hypothesis import given, strategies as st

from bspmort.covariance import CorrelationPair
from bspmort.errors import DomainError
from bspmort.statespace import (HyperParams, StateLayout, assemble, observation_matrix,
                                process_noise, process_noise_block, regression_initial_belief,
                                transition_block, transition_matrix)
from bspmort.basis import design_matrix
from oracles import van_loan

pos = st.floats(0.05, 3.0)


def test_transition_examples():
    ref = np.array([[1, 1, 0.5], [0, 1, 1], [0, 0, 1.0]])
    np.testing.assert_array_equal(transition_block(1, 1), ref)
    np.testing.assert_array_equal(transition_block(2, 0.5), ref)
    np.testing.assert_allclose(transition_block(1, 1e-12), np.eye(3), atol=1e-11)


@pytest.mark.parametrize("lam, delta", [(0, 1), (1, 0), (-1, 1), (1, -2)])
def test_transition_rejects_nonpositive(lam, delta):
    with pytest.raises(DomainError):
        transition_block(lam, delta)


def test_noise_block_examples():
    hp = HyperParams(1.0, 1.0, 0.0, 1.0)
    np.testing.assert_allclose(process_noise_block(hp, 1.0, 1.0, 1.0),
                               [[1 / 3, 1 / 2, 0], [1 / 2, 1, 0], [0, 0, 0]], atol=1e-15)
    hp = HyperParams(1.0, 0.7, 0.3, 1.4)
    np.testing.assert_array_equal(process_noise_block(hp, 0.0, 0.0, 1.0), np.zeros((3, 3)))
    # delta = 2, lambda = 1, unit variances: entries evaluated by hand
    hp = HyperParams(1.0, 1.0, 1.0, 1.0)
    b1 = np.array([[8 / 3, 2, 0], [2, 2, 0], [0, 0, 0]])
    b2 = np.array([[32 / 20, 16 / 8, 8 / 6], [16 / 8, 8 / 3, 4 / 2], [8 / 6, 4 / 2, 2]])
    np.testing.assert_allclose(process_noise_block(hp, 1.0, 1.0, 2.0), b1 + b2, atol=1e-14)
    with pytest.raises(DomainError):
        process_noise_block(hp, 1.0, 1.0, 0.0)


@given(pos, pos, st.floats(1e-4, 2.0), st.floats(1e-4, 2.0))
def test_blocks_match_van_loan(lam, delta, s2b, s2a):
    hp = HyperParams(1.0, s2b, s2a, lam)
    F = lam * np.diag([1.0, 1.0], 1)
    Phi, Qd = van_loan(F, np.diag([0.0, s2b, s2a]), delta)
    np.testing.assert_allclose(transition_block(lam, delta), Phi, atol=1e-10, rtol=1e-10)
    np.testing.assert_allclose(process_noise_block(hp, 1.0, 1.0, delta), Qd,
                               atol=1e-10 * max(1.0, np.abs(Qd).max()))


@given(pos, pos, st.floats(0.5, 2.0))
def test_lambda_delta_invariance(lam, delta, c):
    # T depends on lambda * delta only; Q/delta as well
    np.testing.assert_allclose(transition_block(lam * c, delta / c), transition_block(lam, delta),
                               rtol=1e-13)
    hp1 = HyperParams(1.0, 0.3, 0.2, lam)
    hp2 = HyperParams(1.0, 0.3 * c, 0.2 * c, lam * c)
    np.testing.assert_allclose(process_noise_block(hp2, 1, 1, delta / c),
                               process_noise_block(hp1, 1, 1, delta), rtol=1e-12, atol=1e-15)


def test_full_q_is_psd(basis, correlations, rng):
    for _ in range(50):
        hp = HyperParams(1.0, *np.exp(rng.uniform(-12, 1, 2)), float(np.exp(rng.uniform(-2, 2))))
        Q = process_noise(hp, correlations, float(rng.uniform(0.2, 3)))
        assert np.allclose(Q, Q.T)
        assert np.linalg.eigvalsh(Q).min() >= -1e-8 * max(1.0, np.abs(Q).max())


def test_offdiagonal_block_structure():
    R = CorrelationPair(np.array([[1, 0.5], [0.5, 1.0]]), np.eye(2))
    hp = HyperParams(0.1, 1.0, 1.0, 1.0)
    Q = process_noise(hp, R, 1.0)
    off = Q[0:3, 3:6]
    np.testing.assert_array_equal(off[2], 0)
    np.testing.assert_array_equal(off[:, 2], 0)
    np.testing.assert_allclose(off, 0.5 * process_noise_block(hp, 1.0, 0.0, 1.0), atol=1e-15)


def test_transition_is_block_diagonal():
    T = transition_matrix(4, 1.3, 0.8)
    blk = transition_block(1.3, 0.8)
    np.testing.assert_array_equal(T, np.kron(np.eye(4), blk))
    np.testing.assert_array_equal(transition_matrix(1, 1.3, 0.8), blk)


def test_layout():
    lay = StateLayout(3)
    assert lay.dim == 9
    assert lay.level(2) == 6 and lay.slope(2) == 7 and lay.inst_mean(2) == 8


def test_observation_matrix(basis):
    G = design_matrix(basis, [0, 15.5, 100])
    Z = observation_matrix(G)
    np.testing.assert_array_equal(Z[:, 0::3], G)
    np.testing.assert_array_equal(Z[:, 1::3], 0)
    np.testing.assert_array_equal(Z[:, 2::3], 0)


def test_assemble(basis, correlations):
    hp = HyperParams(0.02, 1e-3, 1e-5, 1.2)
    y0 = np.linspace(-8, -1, 101)
    m = assemble(basis, correlations, hp, np.ones(9), first_obs=y0)
    assert m.T.shape == (9, 60, 60) and m.Q.shape == (9, 60, 60)
    np.testing.assert_array_equal(m.H, 0.02 * np.eye(101))
    np.testing.assert_array_equal(m.initial_belief.cov, 10 * np.eye(60))
    np.testing.assert_array_equal(m.initial_belief.mean[1::3], 0)
    G = design_matrix(basis, basis.age_grid)
    coef, *_ = np.linalg.lstsq(G, y0, rcond=None)
    np.testing.assert_allclose(m.initial_belief.mean[0::3], coef)


def test_assemble_unequal_lags(basis, correlations):
    hp = HyperParams(0.02, 1e-3, 1e-5, 1.2)
    m = assemble(basis, correlations, hp, [1.0, 2.0, 1.0])
    np.testing.assert_allclose(m.T[1], transition_matrix(basis.p, 1.2, 2.0))
    np.testing.assert_allclose(m.Q[2], process_noise(hp, correlations, 1.0))


def test_assemble_errors(basis, correlations):
    hp = HyperParams(0.02, 1e-3, 1e-5, 1.2)
    with pytest.raises(DomainError):
        assemble(basis, correlations, hp, [1.0, 0.0])
    with pytest.raises(DomainError):
        assemble(basis, CorrelationPair(np.eye(3), np.eye(3)), hp, [1.0])
    with pytest.raises(DomainError):
        assemble(basis, correlations, hp, [1.0], ages=[0, 120])


def test_initial_belief_with_missing(basis):
    G = design_matrix(basis, basis.age_grid)
    y0 = G @ np.linspace(-9, -1, basis.p)
    y0[3::7] = np.nan
    b = regression_initial_belief(G, y0)
    np.testing.assert_allclose(b.mean[0::3], np.linspace(-9, -1, basis.p), atol=1e-9)


def test_hyperparams_round_trip():
    hp = HyperParams(0.01, 1e-4, 1e-6, 1.5)
    np.testing.assert_allclose(HyperParams.from_log(hp.to_log()).to_log(), hp.to_log())
    assert HyperParams.from_dict(hp.to_dict()) == hp
    with pytest.raises(DomainError):
        HyperParams(-1, 1, 1, 1)
    with pytest.raises(DomainError):
        HyperParams(1, 1, 1, 0)
