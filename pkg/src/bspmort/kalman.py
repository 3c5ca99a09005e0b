"""Kalman filtering, fixed-interval smoothing and the marginal likelihood.

Missing cells are handled by deleting the corresponding rows of ``Z`` and
rows/columns of ``H`` at that step. Innovation covariances are factored by
Cholesky; a failed factorization is retried once with ``1e-10 * I`` added.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import InputError, NumericalError
from .statespace import GaussianBelief, StateSpaceModel

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER = 1e-10


@dataclass
class FilterResult:
    """Per-step output of :func:`filter`.

    Arrays are indexed by time step ``s = 0 .. n-1``. ``pred_*`` is the
    belief about ``b_s`` given observations before ``s``; ``filt_*`` includes
    observation ``s``.
    """

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    innovations: list
    innovation_covs: list
    loglik_terms: np.ndarray
    observed: np.ndarray
    max_asymmetry: float = 0.0
    # per-step pieces reused by the smoother
    _z_obs: list = field(default_factory=list, repr=False)
    _finv_v: list = field(default_factory=list, repr=False)
    _finv_z: list = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.pred_mean.shape[0]

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_terms))

    def predicted(self, s) -> GaussianBelief:
        return GaussianBelief(self.pred_mean[s], self.pred_cov[s])

    def filtered(self, s) -> GaussianBelief:
        return GaussianBelief(self.filt_mean[s], self.filt_cov[s])


@dataclass
class SmootherResult:
    mean: np.ndarray
    cov: np.ndarray
    r: np.ndarray = field(repr=False, default=None)
    V: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def belief(self, s) -> GaussianBelief:
        return GaussianBelief(self.mean[s], self.cov[s])


def _sym(A):
    return 0.5 * (A + A.T)


def _cholesky(F, step):
    try:
        return linalg.cho_factor(F, lower=True, check_finite=False), F
    except linalg.LinAlgError:
        pass
    F = F + JITTER * np.eye(F.shape[0])
    try:
        return linalg.cho_factor(F, lower=True, check_finite=False), F
    except linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite", step) from exc


def _logdet(cf):
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def prepare_observations(model: StateSpaceModel, y, mask=None):
    """Validate observations; returns float array ``(n, k)`` and boolean mask.

    Without an explicit mask, non-finite entries are treated as missing.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != model.obs_dim:
        raise InputError(f"observations must have shape (n, {model.obs_dim}), got {y.shape}")
    if mask is None:
        mask = np.isfinite(y)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != y.shape:
            raise InputError("mask shape does not match observations")
        bad = mask & ~np.isfinite(y)
        if np.any(bad):
            s, i = np.argwhere(bad)[0]
            raise InputError(f"non-finite observation marked observed at step {s}, row {i}")
    if y.shape[0] > model.n_times:
        raise InputError(f"model covers {model.n_times} time points, got {y.shape[0]} observations")
    return y, mask


def filter(model: StateSpaceModel, y, mask=None) -> FilterResult:
    """Run the Kalman filter.

    Parameters
    ----------
    model : StateSpaceModel
    y : array_like, shape (n, k)
        Observations; NaN marks a missing cell when ``mask`` is omitted.
    mask : array_like of bool, optional
        True where an observation is present.
    """
    y, mask = prepare_observations(model, y, mask)
    n, k = y.shape
    m = model.state_dim
    Z, H, T, Q = model.Z, model.H, model.T, model.Q

    pred_mean = np.empty((n, m))
    pred_cov = np.empty((n, m, m))
    filt_mean = np.empty((n, m))
    filt_cov = np.empty((n, m, m))
    terms = np.zeros(n)
    innovations, inn_covs, z_obs, finv_v, finv_z = [], [], [], [], []
    asym = 0.0

    a = np.array(model.initial_belief.mean, dtype=float)
    P = np.array(model.initial_belief.cov, dtype=float)
    for s in range(n):
        pred_mean[s], pred_cov[s] = a, P
        o = mask[s]
        if np.any(o):
            Zo = Z[o]
            v = y[s, o] - Zo @ a
            ZP = Zo @ P
            F = _sym(ZP @ Zo.T + H[np.ix_(o, o)])
            cf, F = _cholesky(F, s)
            fv = linalg.cho_solve(cf, v, check_finite=False)
            fz = linalg.cho_solve(cf, Zo, check_finite=False)
            a = a + ZP.T @ fv
            P_new = P - ZP.T @ (fz @ P)
            asym = max(asym, float(np.max(np.abs(P_new - P_new.T))))
            P = _sym(P_new)
            terms[s] = -0.5 * (_logdet(cf) + v @ fv + o.sum() * LOG_2PI)
        else:
            Zo = v = F = fv = fz = None
        innovations.append(v)
        inn_covs.append(F)
        z_obs.append(Zo)
        finv_v.append(fv)
        finv_z.append(fz)
        filt_mean[s], filt_cov[s] = a, P
        if s < n - 1:
            a = T[s] @ a
            P = _sym(T[s] @ P @ T[s].T + Q[s])

    return FilterResult(pred_mean, pred_cov, filt_mean, filt_cov, innovations, inn_covs,
                        terms, mask, asym, z_obs, finv_v, finv_z)


def predict(model: StateSpaceModel, belief: GaussianBelief, step: int) -> GaussianBelief:
    """Propagate a belief through transition ``step``."""
    Ts = model.T[step]
    return GaussianBelief(Ts @ belief.mean, _sym(Ts @ belief.cov @ Ts.T + model.Q[step]))


def smooth(model: StateSpaceModel, fr: FilterResult) -> SmootherResult:
    """Fixed-interval smoother by the backward ``r``/``V`` recursions.

    Starts from ``r = 0``, ``V = 0`` after the last step; the smoothed belief
    at step ``s`` is ``a_s + P_s r_{s-1}``, ``P_s - P_s V_{s-1} P_s``.
    """
    n = fr.n
    if len(fr.innovations) != n or fr.pred_cov.shape[0] != n:
        raise InputError("filter result is internally inconsistent")
    if n > model.n_times:
        raise InputError("filter result is longer than the model time grid")
    m = model.state_dim
    mean = np.empty((n, m))
    cov = np.empty((n, m, m))
    r_all = np.empty((n, m))
    V_all = np.empty((n, m, m))
    r = np.zeros(m)
    V = np.zeros((m, m))
    for s in range(n - 1, -1, -1):
        a, P = fr.pred_mean[s], fr.pred_cov[s]
        Zo = fr._z_obs[s]
        last = s == n - 1
        if Zo is not None:
            fv, fz = fr._finv_v[s], fr._finv_z[s]
            r_new = Zo.T @ fv
            V_new = Zo.T @ fz
            if not last:
                Ts = model.T[s]
                L = Ts - Ts @ (P @ (Zo.T @ fz))
                r_new = r_new + L.T @ r
                V_new = V_new + L.T @ V @ L
        elif last:
            r_new, V_new = np.zeros(m), np.zeros((m, m))
        else:
            Ts = model.T[s]
            r_new = Ts.T @ r
            V_new = Ts.T @ V @ Ts
        r, V = r_new, _sym(V_new)
        r_all[s], V_all[s] = r, V
        mean[s] = a + P @ r
        cov[s] = _sym(P - P @ V @ P)
    return SmootherResult(mean, cov, r_all, V_all)


def project_to_surface(model: StateSpaceModel, belief: GaussianBelief, rows=None) -> GaussianBelief:
    """Law of ``f = Z b`` implied by a belief on the state."""
    Z = model.Z if rows is None else model.Z[rows]
    return GaussianBelief(Z @ belief.mean, _sym(Z @ belief.cov @ Z.T))


def _collapse_cache(model, mask):
    """Per missingness pattern: quantities for collapsing observations onto
    the nonzero columns of ``Z`` (exact when ``H`` is diagonal)."""
    cols = np.flatnonzero(np.any(model.Z != 0, axis=0))
    X = model.Z[:, cols]
    h = np.diag(model.H)
    cache = {}
    for o in np.unique(mask, axis=0):
        if not np.any(o):
            continue
        Xo, ho = X[o], h[o]
        if Xo.shape[0] < cols.size or np.any(ho <= 0):
            cache[o.tobytes()] = None
            continue
        w = 1.0 / ho
        A = _sym(Xo.T @ (w[:, None] * Xo))
        try:
            cA = linalg.cho_factor(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            cache[o.tobytes()] = None
            continue
        Ainv = _sym(linalg.cho_solve(cA, np.eye(cols.size), check_finite=False))
        proj = Ainv @ (Xo.T * w)
        const = -0.5 * ((o.sum() - cols.size) * LOG_2PI + np.sum(np.log(ho)) + _logdet(cA))
        cache[o.tobytes()] = (Xo, w, Ainv, proj, const)
    return cols, cache


def _permute_stack(A, pix):
    if A.shape[0] and A.strides[0] == 0:
        return np.broadcast_to(np.ascontiguousarray(A[0][pix]), A.shape)
    return np.ascontiguousarray(A[(slice(None),) + pix])


def _loglik_collapsed(model, y, mask):
    H = model.H
    if np.any(H - np.diag(np.diag(H))):
        return filter(model, y, mask).loglik
    cols, cache = _collapse_cache(model, mask)
    c = cols.size
    # permute so the loaded coordinates come first and slice as views
    perm = np.concatenate([cols, np.setdiff1d(np.arange(model.state_dim), cols)])
    pix = np.ix_(perm, perm)
    T = _permute_stack(model.T, pix)
    Q = _permute_stack(model.Q, pix)
    Zp = model.Z[:, perm]
    a = np.array(model.initial_belief.mean, dtype=float)[perm]
    P = np.array(model.initial_belief.cov, dtype=float)[pix]
    n = y.shape[0]
    total = 0.0
    for s in range(n):
        o = mask[s]
        if o.any():
            entry = cache[o.tobytes()]
            if entry is None:
                Zo = Zp[o]
                v = y[s, o] - Zo @ a
                ZP = Zo @ P
                F = ZP @ Zo.T + H[np.ix_(o, o)]
                nobs = int(o.sum())
            else:
                Xo, w, Ainv, proj, const = entry
                yo = y[s, o]
                ystar = proj @ yo
                e = yo - Xo @ ystar
                total += const - 0.5 * (e @ (w * e))
                v = ystar - a[:c]
                ZP = P[:c]
                F = P[:c, :c] + Ainv
                nobs = c
            cF, info = lapack.dpotrf(F, lower=1, clean=0)
            if info != 0:
                cF, info = lapack.dpotrf(F + JITTER * np.eye(F.shape[0]), lower=1, clean=0)
                if info != 0:
                    raise NumericalError("innovation covariance is not positive definite", s)
            W, _ = lapack.dtrtrs(cF, np.column_stack([v, ZP]), lower=1)
            wv, WZ = W[:, 0], W[:, 1:]
            a = a + WZ.T @ wv
            P = P - WZ.T @ WZ
            total += -0.5 * (2.0 * np.log(np.diag(cF)).sum() + wv @ wv + nobs * LOG_2PI)
        if s < n - 1:
            Ts = T[s]
            a = Ts @ a
            P = Ts @ P @ Ts.T + Q[s]
    return float(total)


def loglik(model: StateSpaceModel, y, mask=None, method: str = "auto") -> float:
    """Marginal log-likelihood by the prediction-error decomposition.

    ``method="full"`` runs :func:`filter`; ``"collapsed"`` (and ``"auto"``)
    first reduces each step's observations to the span of the nonzero
    columns of ``Z``, which gives the same value at lower cost.
    """
    y, mask = prepare_observations(model, y, mask)
    if method == "full":
        return filter(model, y, mask).loglik
    if method not in ("auto", "collapsed"):
        raise ValueError(f"unknown method {method!r}")
    return _loglik_collapsed(model, y, mask)


def sample_smoothing(model: StateSpaceModel, fr: FilterResult, n_draws: int, rng,
                     first: int = 0) -> np.ndarray:
    """Joint draws of ``b_first .. b_{n-1}`` given all observations.

    Forward-filter backward-sampling: the last state is drawn from its
    filtered law, earlier ones from ``b_s | b_{s+1}, y_{1:s}``.
    Returns an array of shape ``(n_draws, n - first, m)``.
    """
    n, m = fr.filt_mean.shape
    if not 0 <= first < n:
        raise InputError(f"first must be in [0, {n})")
    out = np.empty((n_draws, n - first, m))
    b = _draw(rng, fr.filt_mean[-1], fr.filt_cov[-1], n_draws)
    out[:, -1] = b
    for s in range(n - 2, first - 1, -1):
        Ts = model.T[s]
        Pf = fr.filt_cov[s]
        cf = linalg.cho_factor(fr.pred_cov[s + 1] + JITTER * np.eye(m), lower=True,
                               check_finite=False)
        J = linalg.cho_solve(cf, Ts @ Pf, check_finite=False).T
        cov = _sym(Pf - J @ Ts @ Pf)
        mean = fr.filt_mean[s] + (b - fr.pred_mean[s + 1]) @ J.T
        b = mean + _draw(rng, np.zeros(m), cov, n_draws)
        out[:, s - first] = b
    return out


def _draw(rng, mean, cov, n_draws):
    w, V = np.linalg.eigh(_sym(cov))
    root = V * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal((n_draws, mean.size)) @ root.T
