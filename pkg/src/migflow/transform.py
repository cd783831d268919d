"""Symmetrised Yeo-Johnson power transform and standardisation.

``psi_lam(x) = sgn(x) * ((|x| + 1) ** lam - 1) / lam`` for ``lam != 0`` and
``sgn(x) * log(|x| + 1)`` in the limit ``lam -> 0``. The transform is odd,
strictly increasing and invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, EstimationError

LOG_BRANCH_TOL = 1e-12
LAMBDA_BOUNDS = (-2.0, 3.0)


def psi(x, lam):
    x = np.asarray(x, dtype=float)
    if lam == 1.0:
        return x.copy()
    a = np.abs(x)
    if abs(lam) < LOG_BRANCH_TOL:
        mag = np.log1p(a)
    else:
        mag = np.expm1(lam * np.log1p(a)) / lam
    return np.sign(x) * mag


def psi_prime(x, lam):
    """Derivative ``d psi / dx = (|x| + 1) ** (lam - 1)``."""
    a = np.abs(np.asarray(x, dtype=float))
    return np.exp((lam - 1.0) * np.log1p(a))


def psi_inverse(y, lam):
    y = np.asarray(y, dtype=float)
    if lam == 1.0:
        return y.copy()
    a = np.abs(y)
    if abs(lam) < LOG_BRANCH_TOL:
        return np.sign(y) * np.expm1(a)
    base = lam * a + 1.0
    if np.any(base <= 0):
        raise DomainError(f"value outside the range of psi for lambda={lam}: need lambda*|y| + 1 > 0")
    return np.sign(y) * np.expm1(np.log1p(lam * a) / lam)


@dataclass(frozen=True)
class PowerTransform:
    lam: float

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise DomainError("lambda must be finite")

    def apply(self, x):
        return psi(x, self.lam)

    def invert(self, y):
        return psi_inverse(y, self.lam)

    def derivative(self, x):
        return psi_prime(x, self.lam)


def apply(t, x):
    return t.apply(x)


def invert(t, y):
    return t.invert(y)


def log_likelihood(samples, lam):
    """Gaussian profile log-likelihood of ``psi_lam(samples)``.

    Includes the log-Jacobian ``(lam - 1) * sum(log(|x| + 1))`` so values are
    comparable across ``lam``.
    """
    x = np.asarray(samples, dtype=float)
    y = psi(x, lam)
    var = y.var()
    if not var > 0 or not np.isfinite(var):
        return -np.inf
    return -0.5 * x.size * np.log(var) + (lam - 1.0) * np.log1p(np.abs(x)).sum()


def fit_lambda(samples, bounds=LAMBDA_BOUNDS, grid_step=0.05):
    """Maximum-likelihood ``lam`` on ``bounds``: coarse grid then bounded refinement."""
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size < 10:
        raise EstimationError(f"need at least 10 finite samples to fit lambda, got {x.size}")
    if np.ptp(x) == 0:
        raise EstimationError("cannot fit lambda to constant samples")
    grid = np.arange(bounds[0], bounds[1] + grid_step / 2, grid_step)
    ll = np.array([log_likelihood(x, g) for g in grid])
    best = grid[int(np.argmax(ll))]
    lo, hi = max(bounds[0], best - grid_step), min(bounds[1], best + grid_step)
    res = minimize_scalar(lambda g: -log_likelihood(x, g), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-6})
    lam = float(res.x) if -res.fun >= ll.max() else float(best)
    return PowerTransform(lam)


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DomainError("standard deviation must be positive")

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, y):
        return np.asarray(y, dtype=float) * self.std + self.mean


def fit_standardizer(samples):
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise EstimationError("no finite samples to standardise")
    std = x.std()
    if not std > 0:
        raise EstimationError("cannot standardise samples with zero variance")
    return Standardizer(float(x.mean()), float(std))


def standardize(s, x):
    return s.apply(x)


def destandardize(s, y):
    return s.invert(y)
