"""Asymptotic risks, train errors and GCV factors from a solved fixed point."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve

from .covariance import (
    CorrelationKernel,
    DenseSPD,
    SpectralCovariance,
    autocorrelation,
    build_kernel_matrix,
    df_cross,
)
from .selfconsistent import SelfConsistentSolution, SolverError, solve
from .stransform import s_for_kernel, s_identity

__all__ = [
    "RiskReport",
    "OODQuantities",
    "CorrelatedTestSpec",
    "CorrelatedTestResult",
    "EstimatorFactors",
    "risk_uncorrelated",
    "risk_matched",
    "corrgcv_factor",
    "ood_quantities",
    "risk_ood",
    "train_error_mismatched",
    "correlated_test_spec",
    "risk_correlated_test",
    "estimator_asymptotics",
    "scaling_prediction",
    "double_descent_diagnostics",
    "mismatch_bound_gap",
]


@dataclass(frozen=True, slots=True)
class RiskReport:
    bias_sq: float
    var_X: float
    var_Xeps: float
    R_g: float
    R_out: float
    R_in: float
    sigma_eps_sq: float
    divergent: bool = False

    @staticmethod
    def from_parts(bias_sq: float, var_X: float, var_Xeps: float, R_in: float, sigma_eps_sq: float) -> RiskReport:
        R_g = bias_sq + var_X + var_Xeps
        return RiskReport(bias_sq, var_X, var_Xeps, R_g, R_g + sigma_eps_sq, R_in, sigma_eps_sq)

    @staticmethod
    def diverged(sigma_eps_sq: float, R_in: float = math.inf) -> RiskReport:
        inf = math.inf
        return RiskReport(inf, inf, inf, inf, inf, R_in, sigma_eps_sq, divergent=True)


def _teacher_quadratic(cov: SpectralCovariance, kappa: float) -> float:
    """w̄ᵀΣ(Σ+κ)^{-2}w̄."""
    ev, w2 = cov.eigenvalues, cov.teacher_weights()
    return float(np.sum(w2 * ev / (ev + kappa) ** 2))


def _inv_S(sol: SelfConsistentSolution) -> float:
    return 0.0 if math.isinf(sol.S) else 1.0 / sol.S


def risk_matched(sol: SelfConsistentSolution, cov: SpectralCovariance, sigma_eps_sq: float) -> RiskReport:
    """Risk with matched noise correlations K' = K and test covariance Σ' = Σ."""
    g = sol.gamma
    if g >= 1:
        return RiskReport.diverged(sigma_eps_sq, 0.0)
    quad = _teacher_quadratic(cov, sol.kappa)
    bias = sol.kappa**2 * quad
    var_x = bias * g / (1.0 - g)
    var_eps = sigma_eps_sq * g / (1.0 - g)
    pre = (sol.df1_tilde - sol.df2_tilde) / sol.df1_tilde * _inv_S(sol) / (1.0 - g)
    r_in = pre * (bias + sigma_eps_sq)
    return RiskReport.from_parts(bias, var_x, var_eps, r_in, sigma_eps_sq)


def risk_uncorrelated(sol: SelfConsistentSolution, cov: SpectralCovariance, sigma_eps_sq: float) -> RiskReport:
    """Classical i.i.d. ridge asymptotics with γ = q·df2 and R_in = (λ/κ)² R_out."""
    g = sol.q * sol.df2
    if abs(g - sol.gamma) > 1e-8 * max(g, 1e-300):
        raise ValueError("solution was not computed with an identity sample kernel")
    if g >= 1:
        return RiskReport.diverged(sigma_eps_sq, 0.0)
    quad = _teacher_quadratic(cov, sol.kappa)
    bias = sol.kappa**2 * quad
    var_x = bias * g / (1.0 - g)
    var_eps = sigma_eps_sq * g / (1.0 - g)
    r_out = bias + var_x + var_eps + sigma_eps_sq
    r_in = r_out * _inv_S(sol) ** 2
    return RiskReport.from_parts(bias, var_x, var_eps, r_in, sigma_eps_sq)


def corrgcv_factor(sol: SelfConsistentSolution) -> float:
    """R_out / R_in = S·d̃f1 / (d̃f1 - d̃f2)."""
    gap = sol.df1_tilde - sol.df2_tilde
    if not gap > 0:
        raise SolverError("singular CorrGCV factor: df1_tilde <= df2_tilde", gap)
    return sol.S * sol.df1_tilde / gap


@dataclass(frozen=True, slots=True)
class OODQuantities:
    df2_SSp: float
    df2_KKp: float
    gamma_SSp: float
    gamma_SSpKKp: float
    trace_Kp_resolvent: float


def _sigma_prime_diag(cov: SpectralCovariance, sigma_prime: ArrayLike | None) -> NDArray[np.float64]:
    if sigma_prime is None:
        return cov.eigenvalues
    sp = np.asarray(sigma_prime, dtype=float)
    if sp.ndim == 2:
        sp = np.diag(sp)
    if sp.shape != cov.eigenvalues.shape:
        raise ValueError("Sigma' must match the dimension of Sigma")
    return sp


def _kernel_traces(K: DenseSPD, Kp: DenseSPD | None, kt: float) -> tuple[float, float]:
    """((1/T)Tr[K K'(K+κ̃)^{-2}], (1/T)Tr[K'(K+κ̃)^{-1}])."""
    vals, vecs = K.eigh()
    if Kp is None:
        kp_diag = vals
    else:
        if Kp.order != K.order:
            raise ValueError("K and K' must have the same size")
        kp_diag = np.einsum("ij,ik,kj->j", vecs, Kp.entries, vecs)
    return float(np.mean(vals * kp_diag / (vals + kt) ** 2)), float(np.mean(kp_diag / (vals + kt)))


def ood_quantities(
    sol: SelfConsistentSolution,
    cov: SpectralCovariance,
    sigma_prime: ArrayLike | None,
    K: DenseSPD,
    Kp: DenseSPD | None,
) -> OODQuantities:
    """Cross degrees of freedom and the γ variants for covariate/noise shift.

    ``sigma_prime`` is the test covariance in Σ's eigenbasis (diagonal entries
    or a dense matrix, of which only the diagonal enters the traces).
    """
    sp = _sigma_prime_diag(cov, sigma_prime)
    d_ss = df_cross(cov.eigenvalues, sp, sol.kappa) if sol.kappa > 0 else float(np.mean(sp / cov.eigenvalues))
    d_kk, tr_kp = _kernel_traces(K, Kp, sol.kappa_tilde)
    denom = sol.df1 * sol.df1_tilde
    return OODQuantities(d_ss, d_kk, d_ss * sol.df2_tilde / denom, d_ss * d_kk / denom, tr_kp)


def risk_ood(
    sol: SelfConsistentSolution,
    cov: SpectralCovariance,
    sigma_prime: ArrayLike | None,
    K: DenseSPD,
    Kp: DenseSPD | None,
    sigma_eps_sq: float,
) -> RiskReport:
    """Three-term risk under test covariance Σ' and noise correlation K'.

    R_in in the returned report is the mismatched train error (it ignores Σ').
    """
    g = sol.gamma
    r_in = train_error_mismatched(sol, cov, K, Kp, sigma_eps_sq)
    if g >= 1:
        return RiskReport.diverged(sigma_eps_sq, r_in)
    ood = ood_quantities(sol, cov, sigma_prime, K, Kp)
    sp = _sigma_prime_diag(cov, sigma_prime)
    ev, w2 = cov.eigenvalues, cov.teacher_weights()
    k = sol.kappa
    bias = k**2 * float(np.sum(w2 * sp / (ev + k) ** 2))
    var_x = k**2 * float(np.sum(w2 * ev / (ev + k) ** 2)) * ood.gamma_SSp / (1.0 - g)
    var_eps = sigma_eps_sq * ood.gamma_SSpKKp / (1.0 - g)
    return RiskReport.from_parts(bias, var_x, var_eps, r_in, sigma_eps_sq)


def train_error_mismatched(
    sol: SelfConsistentSolution,
    cov: SpectralCovariance,
    K: DenseSPD,
    Kp: DenseSPD | None,
    sigma_eps_sq: float,
) -> float:
    """Train error with noise correlation K' (K' = None means K' = K)."""
    g = sol.gamma
    if g >= 1:
        return 0.0
    k = sol.kappa
    quad = _teacher_quadratic(cov, k)
    signal = k**2 * _inv_S(sol) * (1.0 - sol.df2_tilde / sol.df1_tilde) / (1.0 - g) * quad
    if sigma_eps_sq == 0 or sol.kappa_tilde == 0:
        return signal
    d_kk, tr_kp = _kernel_traces(K, Kp, sol.kappa_tilde)
    noise = sol.kappa_tilde * (tr_kp - (sol.df1 - sol.df2) / sol.df1 / (1.0 - g) * d_kk)
    return signal + sigma_eps_sq * noise


@dataclass(frozen=True, slots=True)
class CorrelatedTestSpec:
    k: NDArray[np.float64]
    rho: float
    alpha: NDArray[np.float64]
    tau: int = 0


def correlated_test_spec(kernel: CorrelationKernel, K: DenseSPD, tau: int) -> CorrelatedTestSpec:
    """Test point τ steps after the last training sample of a stationary series."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    T = K.order
    lags = T + tau - np.arange(1, T + 1)
    k = autocorrelation(kernel, lags)
    alpha = cho_solve(cho_factor(K.entries), k)
    rho = float(k @ alpha)
    if not rho < 1:
        raise ValueError(f"degenerate test point: rho = {rho:.6g} >= 1")
    return CorrelatedTestSpec(k, rho, alpha, tau)


@dataclass(frozen=True, slots=True)
class CorrelatedTestResult:
    report: RiskReport
    bracket: float
    rho: float
    R_out_full: float
    R_out_approx: float


def correlated_bracket(sol: SelfConsistentSolution, K: DenseSPD, spec: CorrelatedTestSpec) -> float:
    """1 - ρ + κ̃² αᵀK(K+κ̃)^{-2}α."""
    vals, vecs = K.eigh()
    c = vecs.T @ spec.alpha
    kt = sol.kappa_tilde
    extra = kt**2 * float(np.sum(c**2 * vals / (vals + kt) ** 2)) if kt > 0 else 0.0
    return 1.0 - spec.rho + extra


def risk_correlated_test(
    sol: SelfConsistentSolution, K: DenseSPD, spec: CorrelatedTestSpec, base: RiskReport
) -> CorrelatedTestResult:
    """Out-of-sample risk at a test point correlated with the training series.

    The whole R_out (test label noise included) is multiplied by the bracket;
    the returned report keeps R_out = R_g + σ² with σ² the conditional test noise (1-ρ)σ_ε².
    """
    if not spec.rho < 1:
        raise ValueError("degenerate test point: rho >= 1")
    if not np.any(spec.k):
        return CorrelatedTestResult(base, 1.0, 0.0, base.R_out, base.R_out)
    b = correlated_bracket(sol, K, spec)
    noise_test = (1.0 - spec.rho) * base.sigma_eps_sq
    full = b * base.R_out
    bias, var_x = b * base.bias_sq, b * base.var_X
    var_eps = full - noise_test - bias - var_x
    rep = RiskReport(bias, var_x, var_eps, full - noise_test, full, base.R_in, noise_test, base.divergent)
    return CorrelatedTestResult(rep, b, spec.rho, full, (1.0 - spec.rho) * base.R_out)


@dataclass(frozen=True, slots=True)
class EstimatorFactors:
    gcv1: float
    gcv2: float
    carmack: float
    corrgcv: float


def estimator_asymptotics(sol: SelfConsistentSolution) -> EstimatorFactors:
    """Large-size limits of the multiplicative R_out/R_in corrections."""
    corr = corrgcv_factor(sol)
    return EstimatorFactors(
        gcv1=1.0 / (1.0 - sol.df1_tilde) ** 2,
        gcv2=sol.S**2,
        carmack=(1.0 - sol.gamma) ** 2 * corr**2,
        corrgcv=corr,
    )


def scaling_prediction(alpha: float, r: float, ell: float = math.inf) -> float:
    """Exponent of R_out ~ T^e for ridge decaying as λ ~ T^-ℓ."""
    if alpha <= 0 or r <= 0 or ell < 0:
        raise ValueError("alpha, r must be positive and ell non-negative")
    return -2.0 * min(alpha, ell) * min(r, 1.0)


def double_descent_diagnostics(
    cov: SpectralCovariance,
    kernel: CorrelationKernel,
    lam: float,
    q_grid: ArrayLike,
    sigma_eps_sq: float = 0.0,
    prefer: str = "spectrum",
) -> list[dict[str, float]]:
    """Per-q comparison of correlated vs uncorrelated solutions and risks.

    T is N/q rounded; the kernel is realized at that T for the mismatched (K' = I) column.
    """
    rows = []
    N = cov.N
    for q in np.asarray(q_grid, dtype=float):
        T = max(2, int(round(N / q)))
        qq = N / T
        kern = kernel.with_size(T)
        K = build_kernel_matrix(kern)
        s_k = s_for_kernel(kern, prefer=prefer)
        corr = solve(cov, s_k, qq, lam)
        unc = solve(cov, s_identity(), qq, lam)
        matched = risk_matched(corr, cov, sigma_eps_sq)
        base = risk_matched(unc, cov, sigma_eps_sq)
        mism = risk_ood(corr, cov, None, K, DenseSPD(np.eye(T), check=False), sigma_eps_sq)
        rows.append(
            {
                "q": qq,
                "T": T,
                "kappa_corr": corr.kappa,
                "kappa_uncorr": unc.kappa,
                "kappa_tilde_corr": corr.kappa_tilde,
                "kappa_tilde_uncorr": unc.kappa_tilde,
                "gamma_corr": corr.gamma,
                "gamma_uncorr": unc.gamma,
                "R_g_matched": matched.R_g,
                "R_g_uncorr": base.R_g,
                "R_g_mismatched": mism.R_g,
                "var_xeps_matched": matched.var_Xeps,
                "var_xeps_mismatched": mism.var_Xeps,
            }
        )
    return rows


def mismatch_bound_gap(K: DenseSPD, kappa_tilde: float) -> float:
    """((1/T)Tr K^{-1})·d̃f2(κ̃) - df²_{K,I}(κ̃); non-negative, zero at κ̃ = 0."""
    vals = K.eigenvalues
    d2 = float(np.mean((vals / (vals + kappa_tilde)) ** 2))
    cross = float(np.mean(vals / (vals + kappa_tilde) ** 2))
    return float(np.mean(1.0 / vals)) * d2 - cross
