"""Cross-spline correlations from kernels of peak-age distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .basis import BasisSet
from .errors import DomainError

MATERN = "matern"
SQUARED_EXPONENTIAL = "squared_exponential"
#: Sentinel for "no cross-spline correlation".
IDENTITY = "identity"


@dataclass(frozen=True)
class KernelConfig:
    """Stationary correlation kernel over age distance (in years)."""

    family: str = MATERN
    smoothness: float = 0.5
    length_scale: float = 1.0

    def __post_init__(self):
        if self.family not in (MATERN, SQUARED_EXPONENTIAL):
            raise DomainError(f"unknown kernel family {self.family!r}")
        if not self.smoothness > 0:
            raise DomainError("smoothness must be positive")
        if not self.length_scale > 0:
            raise DomainError("length_scale must be positive")

    def to_dict(self):
        return {"family": self.family, "smoothness": self.smoothness,
                "length_scale": self.length_scale}


@dataclass(frozen=True)
class CorrelationPair:
    rho_beta: np.ndarray
    rho_a: np.ndarray


def _matern_array(d, nu, ell):
    r = d / ell
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        s = np.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    if nu == 2.5:
        s = np.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    s = np.sqrt(2.0 * nu) * r
    out = np.ones_like(s)
    pos = s > 0
    sp = s[pos]
    # log scale with the exponentially scaled Bessel function avoids 0 * inf far out
    with np.errstate(divide="ignore"):
        log_k = ((1.0 - nu) * np.log(2.0) - special.gammaln(nu) + nu * np.log(sp)
                 + np.log(special.kve(nu, sp)) - sp)
    out[pos] = np.exp(log_k)
    return np.clip(out, 0.0, 1.0)


def kernel(d, config: KernelConfig):
    """Correlation at nonnegative distance(s) ``d`` under ``config``."""
    arr = np.asarray(d, dtype=float)
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise DomainError("distance must be finite and nonnegative")
    if config.family == SQUARED_EXPONENTIAL:
        out = np.exp(-0.5 * (arr / config.length_scale) ** 2)
    else:
        out = _matern_array(np.atleast_1d(arr), config.smoothness,
                            config.length_scale).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def matern(d: float, config: KernelConfig) -> float:
    if config.family != MATERN:
        raise DomainError("matern() needs a Matern KernelConfig")
    return kernel(d, config)


def correlation_matrix(points, config) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if config is None or config == IDENTITY:
        return np.eye(points.size)
    dist = np.abs(points[:, None] - points[None, :])
    R = kernel(dist, config)
    np.fill_diagonal(R, 1.0)
    return 0.5 * (R + R.T)


def build_correlations(basis: BasisSet, config_beta: KernelConfig | str | None = None,
                       config_a: KernelConfig | str | None = IDENTITY) -> CorrelationPair:
    """Correlations between spline derivative noises and between instantaneous means.

    ``config_beta`` defaults to a Matern kernel with smoothness 0.5 and length
    scale 1 year; ``config_a`` defaults to the identity (no correlation).
    """
    if config_beta is None:
        config_beta = KernelConfig()
    return CorrelationPair(rho_beta=correlation_matrix(basis.peak_ages, config_beta),
                           rho_a=correlation_matrix(basis.peak_ages, config_a))
