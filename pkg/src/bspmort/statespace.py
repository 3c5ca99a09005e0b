"""Exact discrete-time state-space form of the B-spline process.

The state at each time stacks, for every spline ``j``, the triple
``(beta_j, d beta_j / dt, a_j)``: the coefficient, its first derivative and
its local instantaneous mean (expected second derivative). The continuous
dynamics integrate white noise on the derivative and on the instantaneous
mean; observed at lags ``delta`` on the reference scale ``t / lambda`` they
are exactly linear-Gaussian, with the transition and noise blocks below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisSet, design_matrix
from .covariance import CorrelationPair
from .errors import DomainError

STATE_PER_SPLINE = 3
INITIAL_VARIANCE = 10.0


@dataclass(frozen=True)
class HyperParams:
    """Continuous model parameters.

    ``sigma2_obs`` is the observation-noise variance on log-rates,
    ``sigma2_beta`` and ``sigma2_a`` scale the derivative and
    instantaneous-mean noises, ``lam`` is the time length-scale.
    Variances may be zero (degenerate simulation); ``lam`` must be positive.
    """

    sigma2_obs: float
    sigma2_beta: float
    sigma2_a: float
    lam: float

    def __post_init__(self):
        for name in ("sigma2_obs", "sigma2_beta", "sigma2_a"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and nonnegative, got {v}")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise DomainError(f"lam must be positive, got {self.lam}")

    def to_log(self) -> np.ndarray:
        return np.log([self.sigma2_obs, self.sigma2_beta, self.sigma2_a, self.lam])

    @classmethod
    def from_log(cls, theta) -> "HyperParams":
        v = np.exp(np.asarray(theta, dtype=float))
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def to_dict(self):
        return {"sigma2_obs": self.sigma2_obs, "sigma2_beta": self.sigma2_beta,
                "sigma2_a": self.sigma2_a, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d) -> "HyperParams":
        return cls(float(d["sigma2_obs"]), float(d["sigma2_beta"]),
                   float(d["sigma2_a"]), float(d.get("lambda", d.get("lam"))))


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class StateLayout:
    """Index map of the stacked state: spline ``j`` (0-based) owns ``3j .. 3j+2``."""

    p: int

    @property
    def dim(self) -> int:
        return STATE_PER_SPLINE * self.p

    def level(self, j=None):
        return slice(0, self.dim, 3) if j is None else 3 * j

    def slope(self, j=None):
        return slice(1, self.dim, 3) if j is None else 3 * j + 1

    def inst_mean(self, j=None):
        return slice(2, self.dim, 3) if j is None else 3 * j + 2


@dataclass(frozen=True)
class StateSpaceModel:
    """Linear-Gaussian model ``y_s = Z b_s + nu``, ``b_{s+1} = T_s b_s + eta``.

    ``T`` and ``Q`` have shape ``(n_lags, m, m)``; entry ``s`` moves the state
    from time ``s`` to ``s + 1``.
    """

    Z: np.ndarray
    H: np.ndarray
    T: np.ndarray
    Q: np.ndarray
    initial_belief: GaussianBelief
    time_lags: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.Z.shape[0]

    @property
    def n_times(self) -> int:
        """Largest number of time points the model can cover."""
        return self.T.shape[0] + 1


def _check_positive(**kw):
    for name, v in kw.items():
        if not (np.isfinite(v) and v > 0):
            raise DomainError(f"{name} must be positive, got {v}")


def transition_block(lam: float, delta: float) -> np.ndarray:
    """Per-spline transition over one lag (second-order Taylor step)."""
    _check_positive(lam=lam, delta=delta)
    u = lam * delta
    return np.array([[1.0, u, 0.5 * u * u],
                     [0.0, 1.0, u],
                     [0.0, 0.0, 1.0]])


def _noise_shapes(lam, delta):
    d, L = delta, lam
    slope = np.array([[d**3 * L**2 / 3, d**2 * L / 2, 0.0],
                      [d**2 * L / 2, d, 0.0],
                      [0.0, 0.0, 0.0]])
    inst = np.array([[d**5 * L**4 / 20, d**4 * L**3 / 8, d**3 * L**2 / 6],
                     [d**4 * L**3 / 8, d**3 * L**2 / 3, d**2 * L / 2],
                     [d**3 * L**2 / 6, d**2 * L / 2, d]])
    return slope, inst


def process_noise_block(hp: HyperParams, rho_b: float, rho_a: float, delta: float) -> np.ndarray:
    """The ``(j, l)`` 3x3 block of the process-noise covariance."""
    _check_positive(delta=delta)
    slope, inst = _noise_shapes(hp.lam, delta)
    return hp.sigma2_beta * rho_b * slope + hp.sigma2_a * rho_a * inst


def transition_matrix(p: int, lam: float, delta: float) -> np.ndarray:
    return np.kron(np.eye(p), transition_block(lam, delta))


def process_noise(hp: HyperParams, correlations: CorrelationPair, delta: float) -> np.ndarray:
    _check_positive(delta=delta)
    slope, inst = _noise_shapes(hp.lam, delta)
    Q = (hp.sigma2_beta * np.kron(correlations.rho_beta, slope)
         + hp.sigma2_a * np.kron(correlations.rho_a, inst))
    return 0.5 * (Q + Q.T)


def observation_matrix(design: np.ndarray) -> np.ndarray:
    """Interleave two zero columns after every spline column."""
    k, p = design.shape
    Z = np.zeros((k, STATE_PER_SPLINE * p))
    Z[:, 0::STATE_PER_SPLINE] = design
    return Z


def regression_initial_belief(design, y0, observed=None,
                              variance: float = INITIAL_VARIANCE) -> GaussianBelief:
    """Levels from least squares of the first observed year on the design;
    slopes and instantaneous means start at zero; covariance ``variance * I``."""
    design = np.asarray(design, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if observed is None:
        observed = np.isfinite(y0)
    k, p = design.shape
    mean = np.zeros(STATE_PER_SPLINE * p)
    if np.any(observed):
        coef, *_ = np.linalg.lstsq(design[observed], y0[observed], rcond=None)
        mean[0::STATE_PER_SPLINE] = coef
    return GaussianBelief(mean, variance * np.eye(STATE_PER_SPLINE * p))


def _unique_stack(lags, build):
    """Stack ``build(delta)`` per lag, computing each distinct lag once."""
    if lags.size == 0:
        return np.zeros((0,) + build(1.0).shape)
    uniq, inverse = np.unique(lags, return_inverse=True)
    blocks = np.stack([build(float(d)) for d in uniq])
    if uniq.size == 1:
        return np.broadcast_to(blocks[0], (lags.size,) + blocks.shape[1:])
    return blocks[inverse]


def assemble(basis: BasisSet, correlations: CorrelationPair, hp: HyperParams, lags,
             ages=None, first_obs=None, initial: GaussianBelief | None = None,
             design: np.ndarray | None = None) -> StateSpaceModel:
    """Build the state-space model for a basis, correlations and parameters.

    Parameters
    ----------
    lags : array_like
        Lags between consecutive time points on the reference scale; yearly
        data use all ones.
    ages : array_like, optional
        Observed ages (defaults to ``basis.age_grid``).
    first_obs : array_like, optional
        First-year log-rates (NaN for missing) used for the regression
        initialization when ``initial`` is not given.
    design : ndarray, optional
        Precomputed design matrix for ``ages``.
    """
    lags = np.atleast_1d(np.asarray(lags, dtype=float))
    if lags.ndim != 1 or np.any(~(lags > 0)):
        raise DomainError("lags must be a vector of positive numbers")
    p = basis.p
    if correlations.rho_beta.shape != (p, p) or correlations.rho_a.shape != (p, p):
        raise DomainError(f"correlation matrices must be {p}x{p}")
    if design is None:
        design = design_matrix(basis, basis.age_grid if ages is None else ages)
    if design.shape[1] != p:
        raise DomainError("design matrix has wrong number of columns")
    Z = observation_matrix(design)
    k = Z.shape[0]
    H = hp.sigma2_obs * np.eye(k)
    T = _unique_stack(lags, lambda d: transition_matrix(p, hp.lam, d))
    Q = _unique_stack(lags, lambda d: process_noise(hp, correlations, d))

    m = STATE_PER_SPLINE * p
    if initial is None:
        if first_obs is None:
            initial = GaussianBelief(np.zeros(m), INITIAL_VARIANCE * np.eye(m))
        else:
            first_obs = np.asarray(first_obs, dtype=float)
            if first_obs.shape != (k,):
                raise DomainError(f"first_obs must have length {k}")
            initial = regression_initial_belief(design, first_obs)
    if initial.mean.shape != (m,) or initial.cov.shape != (m, m):
        raise DomainError(f"initial belief must have dimension {m}")
    return StateSpaceModel(Z=Z, H=H, T=T, Q=Q, initial_belief=initial, time_lags=lags)
