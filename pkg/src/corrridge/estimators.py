"""Risk estimators computed from (X, y, λ) alone: CorrGCV and its baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from .covariance import DenseSPD
from .selfconsistent import SolverError, richardson_derivative
from .stransform import STransform, interpolate_s, s_empirical, s_from_gram

__all__ = [
    "SingularSystemError",
    "RidgeFit",
    "EstimatorInputs",
    "CorrGCVResult",
    "fit_ridge",
    "estimator_inputs",
    "estimate_corrgcv",
    "estimate_gcv1",
    "estimate_gcv2_altman",
    "estimate_carmack",
    "carmack_factor",
    "estimate_all",
    "sample_autocorrelation",
    "s_from_stationary_fit",
    "s_from_gram_interpolated",
]

FD_RELATIVE_STEP = 1e-5


class SingularSystemError(ValueError):
    """Ridge normal equations are singular."""


@dataclass(frozen=True, slots=True)
class RidgeFit:
    w: NDArray[np.float64]
    R_in: float
    residual: NDArray[np.float64]


def fit_ridge(X: ArrayLike, y: ArrayLike, lam: float) -> RidgeFit:
    """ŵ = (XᵀX/T + λ)^{-1} Xᵀy/T, solved in the smaller of the primal/dual systems.

    λ = 0 gives least squares (T ≥ N) or the minimum-norm interpolator (N > T).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    T, N = X.shape
    if y.shape != (T,):
        raise ValueError("y must have length T")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    try:
        if N <= T:
            A = X.T @ X / T
            A[np.diag_indices(N)] += lam
            w = linalg.solve(A, X.T @ y / T, assume_a="pos")
        else:
            G = X @ X.T / T
            G[np.diag_indices(T)] += lam
            w = X.T @ linalg.solve(G, y / T, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise SingularSystemError(f"singular ridge system at lambda={lam:g}") from exc
    r = y - X @ w
    return RidgeFit(w, float(r @ r) / T, r)


@dataclass(frozen=True, slots=True)
class EstimatorInputs:
    """Shared non-zero spectrum of Σ̂ = XᵀX/T and K̂ = XXᵀ/T, plus the fit summary."""

    shared_spectrum: NDArray[np.float64]
    N: int
    T: int
    lam: float
    R_in: float
    s_kernel: STransform | None = None

    @property
    def q(self) -> float:
        return self.N / self.T

    def df1_sigma_hat(self, lam: float) -> float:
        s = self.shared_spectrum
        return float(np.sum(s / (s + lam))) / self.N

    def df2_sigma_hat(self, lam: float) -> float:
        s = self.shared_spectrum
        return float(np.sum((s / (s + lam)) ** 2)) / self.N

    def df1_gram(self, lam: float) -> float:
        s = self.shared_spectrum
        return float(np.sum(s / (s + lam))) / self.T

    def gram_spectrum(self) -> NDArray[np.float64]:
        pad = max(self.T - self.shared_spectrum.size, 0)
        return np.concatenate([self.shared_spectrum, np.zeros(pad)])


def estimator_inputs(X: ArrayLike, R_in: float, lam: float, s_kernel: STransform | None = None) -> EstimatorInputs:
    X = np.asarray(X, dtype=float)
    T, N = X.shape
    sv = linalg.svdvals(X)
    return EstimatorInputs(sv**2 / T, N, T, lam, R_in, s_kernel)


@dataclass(frozen=True, slots=True)
class CorrGCVResult:
    estimate: float
    factor: float
    df1: float
    df2: float
    df1_tilde: float
    df2_tilde: float
    kappa: float
    kappa_tilde: float
    S: float
    dlogk_dlogl: float
    dlogkt_dlogl: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _chain(inputs: EstimatorInputs, s_k: STransform):
    q = inputs.q

    def kappa(lam: float) -> float:
        u = q * inputs.df1_sigma_hat(lam)
        if u >= 1:
            raise SolverError(f"q*df1 = {u:g} >= 1, estimator undefined at this lambda", u)
        return lam * s_k(u) / (1.0 - u)

    def kappa_tilde(lam: float) -> float:
        return lam / (q * inputs.df1_sigma_hat(lam) * kappa(lam))

    return kappa, kappa_tilde


def _require_s(inputs: EstimatorInputs) -> STransform:
    if inputs.s_kernel is None:
        raise ValueError("this estimator needs an S-transform for the sample kernel")
    return inputs.s_kernel


def estimate_corrgcv(inputs: EstimatorInputs) -> CorrGCVResult:
    """CorrGCV along the data-driven chain df1 → κ → (d̃f1, κ̃) → df2 → d̃f2.

    λ-derivatives of log κ and log κ̃ use Richardson-extrapolated central
    differences of the composed chain with step 1e-5·λ.
    """
    lam, q = inputs.lam, inputs.q
    if not lam > 0:
        raise ValueError("lambda must be positive")
    s_k = _require_s(inputs)
    kappa_fn, kappa_t_fn = _chain(inputs, s_k)
    d1 = inputs.df1_sigma_hat(lam)
    k = kappa_fn(lam)
    u = q * d1
    kt = lam / (k * u)
    h = FD_RELATIVE_STEP * lam
    dlogk = lam * richardson_derivative(lambda x: math.log(kappa_fn(x)), lam, h)
    dlogkt = lam * richardson_derivative(lambda x: math.log(kappa_t_fn(x)), lam, h)
    if not (math.isfinite(dlogk) and math.isfinite(dlogkt) and dlogk != 0 and dlogkt != 0):
        raise SolverError("degenerate lambda-derivative along the estimation chain", dlogkt)
    # λ ∂λ df1_Σ̂ = df2_Σ̂ - df1_Σ̂, exact from the spectrum.
    lam_ddf1 = inputs.df2_sigma_hat(lam) - d1
    d2 = d1 + lam_ddf1 / dlogk
    d2t = u - q * (dlogk / dlogkt) * (d1 - d2)
    gap = u - d2t
    if not gap > 0:
        raise SolverError("singular CorrGCV factor: df1_tilde <= df2_tilde", gap)
    S = k / lam
    factor = S * u / gap
    return CorrGCVResult(inputs.R_in * factor, factor, d1, d2, u, d2t, k, kt, S, dlogk, dlogkt)


def estimate_gcv1(inputs: EstimatorInputs) -> float:
    """R_in / (1 - (1/T)Tr H)², H = K̂(K̂+λ)^{-1}."""
    d = inputs.df1_gram(inputs.lam)
    if d >= 1:
        raise SolverError("GCV1 undefined: Tr(H)/T = 1", d)
    return inputs.R_in / (1.0 - d) ** 2


def estimate_gcv2_altman(inputs: EstimatorInputs) -> float:
    """R_in·S² with S = κ/λ from the data-driven κ."""
    kappa_fn, _ = _chain(inputs, _require_s(inputs))
    S = kappa_fn(inputs.lam) / inputs.lam
    return inputs.R_in * S**2


def carmack_factor(X: ArrayLike, lam: float, K_assumed: DenseSPD | ArrayLike) -> float:
    """1 / [1 - (1/T)Tr(2HK - HKHᵀ)]² for the smoothing matrix H = K̂(K̂+λ)^{-1}."""
    X = np.asarray(X, dtype=float)
    T = X.shape[0]
    K = K_assumed.entries if isinstance(K_assumed, DenseSPD) else np.asarray(K_assumed, dtype=float)
    if K.shape != (T, T):
        raise ValueError("assumed kernel must be T x T")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    d, U = np.linalg.eigh(X @ X.T / T)
    d = np.clip(d, 0.0, None)
    h = d / (d + lam)
    k_diag = np.sum(U * (K @ U), axis=0)
    corr = (2.0 * np.sum(h * k_diag) - np.sum(h * h * k_diag)) / T
    return 1.0 / (1.0 - corr) ** 2


def estimate_carmack(X: ArrayLike, y: ArrayLike, lam: float, K_assumed: DenseSPD | ArrayLike) -> float:
    fit = fit_ridge(X, y, lam)
    return fit.R_in * carmack_factor(X, lam, K_assumed)


def estimate_all(
    X: ArrayLike,
    y: ArrayLike,
    lam: float,
    s_kernel: STransform,
    K_assumed: DenseSPD | None = None,
    fit: RidgeFit | None = None,
) -> dict[str, float]:
    """Every estimator plus the CorrGCV intermediates, as a flat record."""
    fit = fit_ridge(X, y, lam) if fit is None else fit
    inputs = estimator_inputs(X, fit.R_in, lam, s_kernel)
    out: dict[str, float] = {"R_in": fit.R_in, "gcv1": estimate_gcv1(inputs)}
    out["gcv2"] = estimate_gcv2_altman(inputs)
    res = estimate_corrgcv(inputs)
    out["corrgcv"] = res.estimate
    out.update({f"chain_{k}": v for k, v in res.as_dict().items() if k not in ("estimate",)})
    if K_assumed is not None:
        out["carmack"] = fit.R_in * carmack_factor(X, lam, K_assumed)
    return out


def sample_autocorrelation(X: ArrayLike, max_lag: int | None = None) -> NDArray[np.float64]:
    """Biased (1/T-normalized) autocorrelation of the rows of X, unit at lag 0.

    The biased normalization keeps the implied Toeplitz matrix positive semi-definite.
    """
    X = np.asarray(X, dtype=float)
    T = X.shape[0]
    L = T if max_lag is None else min(max_lag + 1, T)
    n_fft = 1 << (2 * T - 1).bit_length()
    F = np.fft.rfft(X, n=n_fft, axis=0)
    acov = np.fft.irfft(np.sum(np.abs(F) ** 2, axis=1), n=n_fft)[:L]
    return acov / acov[0]


def s_from_stationary_fit(X: ArrayLike, max_lag: int | None = None) -> STransform:
    """S_K from a Toeplitz kernel built on the sample autocorrelation of X."""
    c = sample_autocorrelation(X, max_lag)
    T = np.asarray(X).shape[0]
    col = np.zeros(T)
    col[: c.size] = c
    K = DenseSPD(linalg.toeplitz(col), check=False)
    vals = np.clip(K.eigenvalues, 1e-12, None)
    return s_empirical(vals)


def s_from_gram_interpolated(
    X: ArrayLike, grid: ArrayLike | None = None, method: str = "poly", degree: int = 5
) -> STransform:
    """S_K recovered from the Gram spectrum on a grid and smoothed (isotropic features)."""
    X = np.asarray(X, dtype=float)
    T, N = X.shape
    q = N / T
    upper = min(1.0, q)
    if grid is None:
        grid = np.linspace(0.02, 0.95, 40) * upper
    gram = np.concatenate([linalg.svdvals(X) ** 2 / T, np.zeros(max(T - min(N, T), 0))])
    s_raw = s_from_gram(gram, q)
    pts = [(float(u), s_raw(float(u))) for u in np.asarray(grid, dtype=float)]
    return interpolate_s(pts, method=method, degree=degree)
