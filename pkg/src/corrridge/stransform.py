"""S-transforms S_A(df) = (1 - df) / (df · df1_A^{-1}(df)).

Closed forms for the identity, Wishart, exponential and nearest-neighbour
families, spectral estimates by root bracketing, Gram-spectrum recovery and
smooth interpolation of sampled values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .covariance import CorrelationKernel, kernel_eigenvalues

__all__ = [
    "STransform",
    "SDomainError",
    "s_identity",
    "s_wishart_factor",
    "s_exponential",
    "s_nearest_neighbor",
    "s_empirical",
    "s_from_gram",
    "interpolate_s",
    "s_for_kernel",
    "inverse_df1",
    "write_s_table",
    "read_s_table",
]

Scalar = Callable[[float], float]


class SDomainError(ValueError):
    """Argument outside the domain where the S-transform is defined."""


@dataclass(frozen=True, slots=True)
class STransform:
    """A scalar S-transform with optional closed-form derivative.

    ``spectrum`` is set when the transform comes from an explicit (finite)
    spectrum; solvers use it to evaluate df_K(κ̃) directly. ``zero_value`` is
    the df → 0 limit, 1/mean(spectrum), which is 1 for unit-trace kernels.
    """

    evaluator: Scalar
    provenance: str
    valid_domain: tuple[float, float] = (0.0, 1.0)
    derivative: Scalar | None = None
    spectrum: NDArray[np.float64] | None = None
    zero_value: float = 1.0

    def __call__(self, df: float) -> float:
        lo, hi = self.valid_domain
        if not (lo < df <= hi) and not (df == lo == 0.0):
            raise SDomainError(f"df={df!r} outside ({lo}, {hi}] for {self.provenance}")
        if df == 0.0:
            return self.zero_value
        return float(self.evaluator(df))

    def deriv(self, df: float) -> float:
        """dS/d(df); central differences when no closed form is attached."""
        if self.derivative is not None:
            return float(self.derivative(df))
        lo, hi = self.valid_domain
        h = 1e-5 * max(df, 1e-3)
        a, b = max(df - h, lo + 1e-300), min(df + h, hi)
        return (self(b) - self(a)) / (b - a)

    def log_deriv(self, df: float) -> float:
        return self.deriv(df) / self(df)

    def values(self, grid: ArrayLike) -> NDArray[np.float64]:
        return np.array([self(float(x)) for x in np.asarray(grid, dtype=float).ravel()])


def s_identity() -> STransform:
    return STransform(lambda df: 1.0, "analytic(identity)", derivative=lambda df: 0.0)


def s_wishart_factor(q: float) -> STransform:
    """1/(1 - q·df), the white-Wishart S-transform at aspect ratio q."""
    if q <= 0:
        raise ValueError("q must be positive")

    def ev(df: float) -> float:
        if q * df >= 1:
            raise SDomainError(f"pole: q*df = {q * df:g} >= 1")
        return 1.0 / (1.0 - q * df)

    def dv(df: float) -> float:
        return q / (1.0 - q * df) ** 2

    return STransform(ev, f"analytic(wishart q={q:g})", (0.0, min(1.0, 1.0 / q)), dv)


def exponential_b(xi: float) -> float:
    """b = coth(1/ξ), which equals (1/T)Tr K^{-1} of the exponential kernel as T → ∞."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    return 1.0 / math.tanh(1.0 / xi)


def s_exponential(xi: float) -> STransform:
    """S(df) = (b·df + √(1 + (b²-1)df²)) / (1 + df), b = coth(1/ξ)."""
    b = exponential_b(xi)
    c = b * b - 1.0

    def ev(df: float) -> float:
        return (b * df + math.sqrt(1.0 + c * df * df)) / (1.0 + df)

    def dv(df: float) -> float:
        root = math.sqrt(1.0 + c * df * df)
        num = b * df + root
        dnum = b + c * df / root
        return (dnum * (1.0 + df) - num) / (1.0 + df) ** 2

    return STransform(ev, f"analytic(exponential xi={xi:g})", derivative=dv)


def s_nearest_neighbor(b: float) -> STransform:
    """S(df) = (2 - df) / ((1 - df) + √(1 - b²·df(2 - df))) for the arcsine spectrum 1 + b cos θ."""
    if not 0 <= b < 1:
        raise ValueError("b must lie in [0, 1)")
    b2 = b * b

    def ev(df: float) -> float:
        return (2.0 - df) / ((1.0 - df) + math.sqrt(1.0 - b2 * df * (2.0 - df)))

    def dv(df: float) -> float:
        root = math.sqrt(1.0 - b2 * df * (2.0 - df))
        den = (1.0 - df) + root
        dden = -1.0 - b2 * (1.0 - df) / root
        return (-den - (2.0 - df) * dden) / den**2

    return STransform(ev, f"analytic(nearest_neighbor b={b:g})", derivative=dv)


def _df1_arr(s: NDArray[np.float64], lam: float) -> float:
    return float(np.mean(s / (s + lam)))


def _df2_arr(s: NDArray[np.float64], lam: float) -> float:
    return float(np.mean((s / (s + lam)) ** 2))


def inverse_df1(spectrum: ArrayLike, df: float) -> float:
    """λ with df1(spectrum, λ) = df, bracketed on [1e-14, 1e14]·λ_max in log λ."""
    s = np.asarray(spectrum, dtype=float).ravel()
    if not 0 < df < 1:
        raise SDomainError("df must lie in (0, 1)")
    top = float(np.max(s))
    lo, hi = math.log(1e-14 * top), math.log(1e14 * top)

    def f(x: float) -> float:
        return _df1_arr(s, math.exp(x)) - df

    if f(lo) < 0:
        raise SDomainError(f"df={df:g} beyond the resolvable range of this spectrum")
    root = brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return math.exp(root)


def s_empirical(spectrum: ArrayLike) -> STransform:
    """S-transform of a finite spectrum, inverting df1 numerically."""
    s = np.asarray(spectrum, dtype=float).ravel()
    if s.size == 0 or np.any(s <= 0):
        raise ValueError("spectrum must be non-empty and positive")
    inv_mean = float(np.mean(1.0 / s))

    def ev(df: float) -> float:
        if df == 1.0:
            return inv_mean
        return (1.0 - df) / (df * inverse_df1(s, df))

    def dv(df: float) -> float:
        if df == 1.0:
            return _endpoint_slope(s)
        lam = inverse_df1(s, df)
        sval = (1.0 - df) / (df * lam)
        return sval * (-1.0 / (1.0 - df) - 1.0 / df - 1.0 / (_df2_arr(s, lam) - df))

    return STransform(ev, f"empirical(n={s.size})", derivative=dv, spectrum=s, zero_value=1.0 / float(np.mean(s)))


def _endpoint_slope(s: NDArray[np.float64]) -> float:
    # Near df = 1 write 1 - df = m1 λ - m2 λ² with m_j = mean(s^-j); then
    # S = (1-df)/(df λ) = (m1 - m2 λ)/(1 - m1 λ) + O(λ²) and dS/d(df) = -dS/dλ / m1.
    m1 = float(np.mean(1.0 / s))
    m2 = float(np.mean(1.0 / s**2))
    ds_dlam = m1 * m1 - m2
    return -ds_dlam / m1


def s_from_gram(
    gram_spectrum: ArrayLike, q: float, sigma_s: STransform | None = None
) -> STransform:
    """Recover S_K from the spectrum of K̂ = XXᵀ/T.

    The Gram identity gives the product S_K(u)·S_Σ(u/q) = (q-u)(1-u)/(u·df_K̂^{-1}(u)).
    With isotropic features S_Σ = 1; otherwise pass ``sigma_s`` to divide it out.
    """
    g = np.clip(np.asarray(gram_spectrum, dtype=float).ravel(), 0.0, None)
    if q <= 0:
        raise ValueError("q must be positive")
    upper = min(1.0, q)

    def ev(u: float) -> float:
        if not 0 < u < upper:
            raise SDomainError(f"u={u:g} outside (0, {upper:g})")
        lam = inverse_df1(g, u)
        val = (q - u) * (1.0 - u) / (u * lam)
        if sigma_s is not None:
            val /= sigma_s(u / q)
        return val

    return STransform(ev, f"gram(q={q:g}, n={g.size})", (0.0, upper))


def interpolate_s(
    samples: Iterable[tuple[float, float]], method: str = "poly", degree: int = 10
) -> STransform:
    """Smooth fit through sampled (df, S) pairs: least-squares polynomial or monotone cubic.

    The polynomial degree is capped at one less than the number of samples.
    """
    pts = np.asarray(list(samples), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 6:
        raise ValueError("need at least 6 (df, S) samples")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) <= 0):
        raise ValueError("df samples must be strictly increasing")
    lo, hi = float(x[0]), float(x[-1])
    if method == "poly":
        poly = np.polynomial.Polynomial.fit(x, y, min(degree, x.size - 1))
        dpoly = poly.deriv()

        def ev(df: float) -> float:
            return float(poly(df))

        def dv(df: float) -> float:
            return float(dpoly(df))

    elif method == "pchip":
        pchip = PchipInterpolator(x, y, extrapolate=True)
        dp = pchip.derivative()

        def ev(df: float) -> float:
            return float(pchip(df))

        def dv(df: float) -> float:
            return float(dp(df))

    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    return STransform(ev, f"interpolated({method}, [{lo:g}, {hi:g}])", (0.0, 1.0), dv)


def s_for_kernel(kernel: CorrelationKernel, prefer: str = "analytic") -> STransform:
    """S_K for a kernel: closed form when one exists, otherwise from the dense spectrum.

    ``prefer="spectrum"`` always uses the finite-T spectrum of the realized matrix.
    """
    if prefer not in ("analytic", "spectrum"):
        raise ValueError("prefer must be 'analytic' or 'spectrum'")
    if prefer == "analytic":
        if kernel.family == "identity":
            return s_identity()
        if kernel.family == "exponential":
            return s_exponential(kernel.param)
        if kernel.family == "nearest_neighbor":
            return s_nearest_neighbor(kernel.param)
    if kernel.family == "identity":
        return STransform(
            lambda df: 1.0, "empirical(identity)", derivative=lambda df: 0.0, spectrum=np.ones(kernel.T)
        )
    return s_empirical(kernel_eigenvalues(kernel))


def write_s_table(path: str | Path, s: STransform, grid: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["df", "S"])
        for x in grid:
            w.writerow([repr(float(x)), repr(s(float(x)))])


def read_s_table(path: str | Path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["df"]), float(r["S"])) for r in rows]
