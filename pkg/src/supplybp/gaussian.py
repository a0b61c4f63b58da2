"""Exact algebra of one- and two-dimensional Gaussians.

Values are kept in mean/covariance form.  Products and quotients convert to
precision form internally, where they reduce to additions and subtractions.

The scalar classes are the reference API; the ``*_batch`` helpers apply the
same operations to stacked arrays and are what the message-passing engine
uses in its inner loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveVariance, SingularMatrix

DET_FLOOR = 1e-300
SYMMETRY_RTOL = 1e-12


@dataclass(frozen=True)
class Gaussian1:
    mean: float
    variance: float

    def __post_init__(self):
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise NonPositiveVariance(f"variance must be positive, got {self.variance}")
        if not np.isfinite(self.mean):
            raise NonPositiveVariance(f"mean must be finite, got {self.mean}")

    @property
    def precision(self) -> float:
        return 1.0 / self.variance

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass(frozen=True, eq=False)
class Gaussian2:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        scale = max(np.abs(cov).max(), 1e-300)
        if abs(cov[0, 1] - cov[1, 0]) > SYMMETRY_RTOL * scale:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if not (np.all(np.isfinite(cov)) and np.all(np.isfinite(mean))):
            raise NonPositiveVariance("non-finite Gaussian2 parameters")
        if not _is_pd(cov):
            raise NonPositiveVariance("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def __eq__(self, other):
        if not isinstance(other, Gaussian2):
            return NotImplemented
        return bool(np.array_equal(self.mean, other.mean) and np.array_equal(self.cov, other.cov))

    def flip(self) -> "Gaussian2":
        """Swap the two components."""
        return Gaussian2(self.mean[::-1].copy(), self.cov[::-1, ::-1].copy())


def _is_pd(cov) -> bool:
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    return a > 0 and d > 0 and a * d - b * b > 0


def product1(a: Gaussian1, b: Gaussian1) -> Gaussian1:
    prec = 1.0 / a.variance + 1.0 / b.variance
    if not prec > 0:
        raise NonPositiveVariance("product has non-positive precision")
    var = 1.0 / prec
    return Gaussian1(var * (a.mean / a.variance + b.mean / b.variance), var)


def quotient1(num: Gaussian1, den: Gaussian1) -> Gaussian1:
    prec = 1.0 / num.variance - 1.0 / den.variance
    if not prec > 0:
        raise NonPositiveVariance(
            f"quotient precision {prec:.3e} <= 0 (denominator at least as informative)")
    var = 1.0 / prec
    return Gaussian1(var * (num.mean / num.variance - den.mean / den.variance), var)


def invert2x2(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if not abs(det) > DET_FLOOR:
        raise SingularMatrix(f"determinant {det} below {DET_FLOOR}")
    out = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
    return 0.5 * (out + out.T)


def _info(g: Gaussian2):
    lam = invert2x2(g.cov)
    return lam, lam @ g.mean


def _from_info(lam, eta) -> Gaussian2:
    lam = 0.5 * (lam + lam.T)
    if not _is_pd(lam):
        raise NonPositiveVariance("resulting precision matrix is not positive definite")
    cov = invert2x2(lam)
    return Gaussian2(cov @ eta, cov)


def product2(a: Gaussian2, b: Gaussian2) -> Gaussian2:
    la, ea = _info(a)
    lb, eb = _info(b)
    return _from_info(la + lb, ea + eb)


def quotient2(num: Gaussian2, den: Gaussian2) -> Gaussian2:
    la, ea = _info(num)
    lb, eb = _info(den)
    return _from_info(la - lb, ea - eb)


def marginalize2(g: Gaussian2, index: int) -> Gaussian1:
    if index not in (0, 1):
        raise ValueError("index must be 0 or 1")
    return Gaussian1(float(g.mean[index]), float(g.cov[index, index]))


# -- batched helpers --------------------------------------------------------

def inv2x2_batch(m: np.ndarray) -> np.ndarray:
    """Invert a stack of 2x2 matrices, shape (..., 2, 2).

    Raises SingularMatrix if any determinant magnitude is below DET_FLOOR.
    """
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    det = a * d - b * c
    if not np.all(np.abs(det) > DET_FLOOR):
        raise SingularMatrix("singular 2x2 block in batch")
    out = np.empty_like(m)
    out[..., 0, 0] = d / det
    out[..., 1, 1] = a / det
    off = -0.5 * (b + c) / det
    out[..., 0, 1] = off
    out[..., 1, 0] = off
    return out


def matvec2_batch(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", m, v)


def check_pd_batch(cov: np.ndarray) -> None:
    """Raise NonPositiveVariance unless every 2x2 block is finite and PD."""
    a, b, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    ok = np.isfinite(a) & np.isfinite(b) & np.isfinite(d) & (a > 0) & (d > 0) & (a * d - b * b > 0)
    if not np.all(ok):
        raise NonPositiveVariance("covariance block lost positive definiteness")


def check_var_batch(var: np.ndarray) -> None:
    if not np.all(np.isfinite(var) & (var > 0)):
        raise NonPositiveVariance("variance became non-positive or non-finite")


def flip_batch(mean: np.ndarray, cov: np.ndarray):
    """Swap component order of stacked 2-D Gaussians."""
    return mean[..., ::-1], cov[..., ::-1, ::-1]
