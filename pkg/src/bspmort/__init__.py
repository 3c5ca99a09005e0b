"""B-spline processes with locally adaptive dynamic coefficients for
log-mortality surfaces: basis construction, exact state-space form, Kalman
filtering and smoothing, likelihood fitting, drift forecasts and backtests."""

__version__ = "0.1.0"

from .basis import BasisSet, build_basis, build_default_basis, design_matrix
from .covariance import CorrelationPair, KernelConfig, build_correlations
from .errors import BSPError, DomainError, EstimationError, InputError, NumericalError, ParseError
from .statespace import GaussianBelief, HyperParams, StateSpaceModel, assemble

__all__ = [
    "BasisSet", "build_basis", "build_default_basis", "design_matrix",
    "CorrelationPair", "KernelConfig", "build_correlations",
    "BSPError", "DomainError", "EstimationError", "InputError", "NumericalError", "ParseError",
    "GaussianBelief", "HyperParams", "StateSpaceModel", "assemble",
]
