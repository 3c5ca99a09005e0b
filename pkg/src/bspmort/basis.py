"""Clamped B-spline bases over age.

Basis functions are evaluated with the Cox-de Boor recursion on a clamped
knot vector, so exactly one function is active at each boundary age.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

#: Interior breakpoints on [0, 100]; denser at young and old ages.
DEFAULT_INTERIOR_KNOTS = (1.0, 3.0, 7.0, 12.0, 18.0, 25.0, 33.0, 42.0,
                          52.0, 62.0, 70.0, 77.0, 83.0, 88.0, 92.0, 96.0)
DEFAULT_DEGREE = 3
PEAK_GRID_STEP = 0.01


@dataclass(frozen=True)
class BasisSet:
    """A clamped B-spline basis.

    Attributes
    ----------
    degree : int
        Polynomial degree of every basis function.
    knots : ndarray
        Full clamped knot vector, boundary knots repeated ``degree + 1`` times.
    p : int
        Number of basis functions.
    peak_ages : ndarray
        Age at which each basis function attains its maximum.
    age_grid : ndarray
        Observed ages used to build the default design matrix.
    """

    degree: int
    knots: np.ndarray
    p: int
    peak_ages: np.ndarray
    age_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot locations, boundaries included."""
        return np.unique(self.knots)

    def evaluate(self, x) -> np.ndarray:
        """Values of all basis functions at ``x``; shape ``(len(x), p)``."""
        return cox_de_boor(self.knots, self.degree, x)

    def design(self) -> np.ndarray:
        return design_matrix(self, self.age_grid)


def cox_de_boor(knots, degree: int, x) -> np.ndarray:
    """Evaluate every B-spline of a knot vector at the points ``x``.

    The right end of the knot span is included in the last non-degenerate
    interval, so a clamped basis has ``g_p(x_max) = 1``.
    """
    t = np.asarray(knots, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_int = t.size - 1
    B = np.zeros((x.size, n_int))
    for i in range(n_int):
        if t[i] < t[i + 1]:
            B[:, i] = (x >= t[i]) & (x < t[i + 1])
    last = np.flatnonzero(t[:-1] < t[1:])[-1]
    B[x == t[-1], last] = 1.0

    for d in range(1, degree + 1):
        nxt = np.zeros((x.size, n_int - d))
        for i in range(n_int - d):
            left = t[i + d] - t[i]
            right = t[i + d + 1] - t[i + 1]
            val = np.zeros(x.size)
            if left > 0:
                val += (x - t[i]) / left * B[:, i]
            if right > 0:
                val += (t[i + d + 1] - x) / right * B[:, i + 1]
            nxt[:, i] = val
        B = nxt
    return B


def _peak_ages(knots, degree, lo, hi):
    grid = np.arange(lo, hi + PEAK_GRID_STEP / 2, PEAK_GRID_STEP)
    grid[-1] = min(grid[-1], hi)
    values = cox_de_boor(knots, degree, grid)
    return grid[np.argmax(values, axis=0)]


def build_basis(knots, degree: int = DEFAULT_DEGREE, age_grid=None) -> BasisSet:
    """Build a clamped basis from its distinct breakpoints.

    Parameters
    ----------
    knots : array_like
        Nondecreasing breakpoints including both boundaries, e.g. ``[0, 0.5, 1]``.
    degree : int
        Polynomial degree, at least 1.
    age_grid : array_like, optional
        Observed ages; defaults to the integers inside the knot span.
    """
    k = np.asarray(knots, dtype=float)
    if k.ndim != 1 or k.size < 2:
        raise DomainError("need at least two knots")
    if not np.all(np.isfinite(k)):
        raise DomainError("knots must be finite")
    if np.any(np.diff(k) < 0):
        raise DomainError("knots must be sorted in nondecreasing order")
    if np.unique(k).size < 2:
        raise DomainError("need at least two distinct knots")
    if degree < 1:
        raise DomainError("degree must be at least 1")

    lo, hi = k[0], k[-1]
    interior = k[(k > lo) & (k < hi)]
    full = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    p = interior.size + degree + 1
    if age_grid is None:
        age_grid = np.arange(np.ceil(lo), np.floor(hi) + 1)
    age_grid = np.asarray(age_grid, dtype=float)
    _check_span(full, age_grid)
    return BasisSet(degree=degree, knots=full, p=p,
                    peak_ages=_peak_ages(full, degree, lo, hi), age_grid=age_grid)


def build_default_basis(age_min: float = 0.0, age_max: float = 100.0, ages=None) -> BasisSet:
    """Cubic basis with 20 functions, the default knots rescaled to the range."""
    if not age_min < age_max:
        raise DomainError(f"age_min ({age_min}) must be below age_max ({age_max})")
    scale = (age_max - age_min) / 100.0
    interior = age_min + scale * np.asarray(DEFAULT_INTERIOR_KNOTS)
    return build_basis(np.concatenate([[age_min], interior, [age_max]]),
                       DEFAULT_DEGREE, age_grid=ages)


def _check_span(knots, ages):
    if ages.size and (ages.min() < knots[0] or ages.max() > knots[-1]):
        raise DomainError(
            f"ages must lie in [{knots[0]}, {knots[-1]}], got "
            f"[{ages.min()}, {ages.max()}]")


def design_matrix(basis: BasisSet, ages) -> np.ndarray:
    """The ``k x p`` matrix with entry ``[i, j] = g_j(ages[i])``."""
    ages = np.atleast_1d(np.asarray(ages, dtype=float))
    _check_span(basis.knots, ages)
    return basis.evaluate(ages)
