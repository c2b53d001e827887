"""Renormalized ridges κ, κ̃ and their degrees of freedom.

The pair solves

    κ = λ·S_K(u) / (1 - u),   u = q·df1_Σ(κ),   κ·κ̃ = λ / u,

where u doubles as d̃f1 = df1_K(κ̃). λ-derivatives use the closed forms

    dκ/dλ = S (1 - d̃f2/d̃f1) / (1 - γ),   dκ̃/dλ = S̃ (1 - df2/df1) / (1 - γ),

with γ = (df2/df1)(d̃f2/d̃f1), S = κ/λ and S̃ = κ̃/λ.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .covariance import SpectralCovariance
from .stransform import STransform, inverse_df1

__all__ = [
    "SolverError",
    "SolveInput",
    "SelfConsistentSolution",
    "IdentityReport",
    "solve",
    "solve_kappa",
    "solve_kappa_tilde",
    "ridgeless_kappa",
    "gamma",
    "dkappa_dlambda",
    "dkappa_tilde_dlambda",
    "empirical_kappa",
    "richardson_derivative",
    "verify_identities",
]

RIDGELESS_THRESHOLD = 1e-12
PICARD_DAMPING = 0.5
PICARD_MAX_ITER = 200
MAX_ITER = 10_000


class SolverError(RuntimeError):
    """Fixed-point solve failed; carries the last residual."""

    def __init__(self, message: str, residual: float = math.nan) -> None:
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, slots=True)
class SolveInput:
    covariance: SpectralCovariance
    kernel_s: STransform
    q: float
    lam: float

    def __post_init__(self) -> None:
        if not self.q > 0:
            raise ValueError("q must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")


@dataclass(frozen=True, slots=True)
class SelfConsistentSolution:
    lam: float
    q: float
    kappa: float
    kappa_tilde: float
    S: float
    S_tilde: float
    df1: float
    df2: float
    df1_tilde: float
    df2_tilde: float
    gamma: float
    dkappa_dlambda: float
    dkappa_tilde_dlambda: float
    regime: str = "ridge"
    converged: bool = True
    iterations: int = 0
    method: str = ""

    @property
    def divergent(self) -> bool:
        return self.gamma >= 1.0

    def to_json(self) -> str:
        return json.dumps({k: _jsonable(v) for k, v in asdict(self).items()})


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _df1(ev: np.ndarray, x: float) -> float:
    return float(np.mean(ev / (ev + x)))


def _df2(ev: np.ndarray, x: float) -> float:
    return float(np.mean((ev / (ev + x)) ** 2))


def ridgeless_kappa(covariance: SpectralCovariance, q: float) -> float:
    """Unique κ > 0 with q·df1_Σ(κ) = 1 (overparameterized ridgeless limit)."""
    if q <= 1:
        raise ValueError("ridgeless kappa is positive only for q > 1")
    ev = covariance.eigenvalues

    def f(x: float) -> float:
        return q * _df1(ev, math.exp(x)) - 1.0

    lo = math.log(ev[-1]) - 1.0
    while f(lo) < 0:
        lo -= 5.0
    hi = math.log(ev[0] * q) + 1.0
    while f(hi) > 0:
        hi += 5.0
    return math.exp(brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def _df2_tilde_from_s(kernel_s: STransform, u: float) -> float:
    # d̃f2 = u + 1/(d log κ̃/du), with κ̃(u) = (1-u)/(u S_K(u)).
    slope = -1.0 / (1.0 - u) - 1.0 / u - kernel_s.log_deriv(u)
    return u + 1.0 / slope


def _kernel_quantities(kernel_s: STransform, u: float, kappa_tilde: float) -> float:
    """d̃f2 at the solution, from the spectrum when available."""
    if kernel_s.spectrum is not None:
        return _df2(kernel_s.spectrum, kappa_tilde)
    return _df2_tilde_from_s(kernel_s, u)


def _kappa_root(inp: SolveInput) -> tuple[float, int, str]:
    ev = inp.covariance.eigenvalues
    q, lam, s_k = inp.q, inp.lam, inp.kernel_s
    k0 = ridgeless_kappa(inp.covariance, q) if q > 1 else 0.0

    def u_of(k: float) -> float:
        return min(q * _df1(ev, k), 1.0)

    spec = s_k.spectrum
    if spec is not None:
        # h(κ) = df1_K(λ/(κu)) - u is increasing in κ and needs no inner inversion.
        def resid(x: float) -> float:
            k = math.exp(x)
            u = u_of(k)
            return _df1(spec, lam / (k * u)) - u

    else:

        def resid(x: float) -> float:
            k = math.exp(x)
            u = u_of(k)
            return k * (1.0 - u) / s_k(u) - lam

    iters = 0
    if spec is None:
        # Damped Picard on κ ← λ S_K(u)/(1-u); abandoned as soon as it leaves the domain.
        k = max(lam, 2.0 * k0) if k0 > 0 else max(lam, 1e-300)
        ok = False
        for iters in range(1, PICARD_MAX_ITER + 1):
            u = u_of(k)
            if u >= 1.0:
                break
            target = lam * s_k(u) / (1.0 - u)
            new = (1.0 - PICARD_DAMPING) * k + PICARD_DAMPING * target
            if not (new > k0) or not math.isfinite(new):
                break
            if abs(new - k) <= 1e-15 * new:
                k = new
                ok = True
                break
            k = new
        if ok and abs(resid(math.log(k))) <= 1e-13 * lam:
            return k, iters, "picard"

    lo = math.log(k0) if k0 > 0 else math.log(max(lam, 1e-300)) - 2.0
    n = 0
    while resid(lo) > 0:
        lo -= 5.0
        n += 1
        if n > 200:
            raise SolverError("could not bracket kappa from below", resid(lo))
    hi = math.log(max(lam, k0, 1e-300)) + 1.0
    while resid(hi) < 0:
        hi += 2.0
        n += 1
        if n > 400:
            raise SolverError("could not bracket kappa from above", resid(hi))
    x, info = brentq(
        resid, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=MAX_ITER, full_output=True
    )
    if not info.converged:
        raise SolverError("bracketed solve did not converge", resid(x))
    return math.exp(x), iters + info.iterations, "bracket"


def _assemble(
    inp: SolveInput, kappa: float, kappa_tilde: float, df1: float, df2: float, u: float, d2t: float
) -> tuple[float, float, float, float, float]:
    g = (df2 / df1) * (d2t / u)
    S = kappa / inp.lam
    S_t = kappa_tilde / inp.lam
    dk = S * (1.0 - d2t / u) / (1.0 - g)
    dkt = S_t * (1.0 - df2 / df1) / (1.0 - g)
    return g, S, S_t, dk, dkt


def _solve_ridgeless(inp: SolveInput) -> SelfConsistentSolution:
    cov, q, s_k = inp.covariance, inp.q, inp.kernel_s
    ev = cov.eigenvalues
    lam = inp.lam
    if q > 1:
        k0 = ridgeless_kappa(cov, q)
        d1, d2 = 1.0 / q, _df2(ev, k0)
        g = q * d2
        s1 = s_k(1.0)
        return SelfConsistentSolution(
            lam, q, k0, lam / k0, math.inf, 1.0 / k0, d1, d2, 1.0, 1.0, g,
            s1 / (1.0 - g), (1.0 - d2 / d1) / (k0 * (1.0 - g)),
            regime="ridgeless_overparameterized", method="pole",
        )
    if q < 1:
        s_q = s_k(q)
        kt = (1.0 - q) / (q * s_q)
        if s_k.spectrum is not None:
            kt = inverse_df1(s_k.spectrum, q)
            d2t = _df2(s_k.spectrum, kt)
        else:
            d2t = _df2_tilde_from_s(s_k, q)
        g = d2t / q
        S = s_q / (1.0 - q)
        m_sigma = float(np.mean(1.0 / ev))
        return SelfConsistentSolution(
            lam, q, 0.0, kt, S, math.inf, 1.0, 1.0, q, d2t, g, S, (m_sigma / q) / (1.0 - g),
            regime="ridgeless_underparameterized", method="pole",
        )
    return SelfConsistentSolution(
        lam, q, 0.0, 0.0, math.inf, math.inf, 1.0, 1.0, 1.0, 1.0, 1.0, math.inf, math.inf,
        regime="interpolation_threshold", converged=False, method="pole",
    )


def solve(
    covariance: SpectralCovariance, kernel_s: STransform, q: float, lam: float
) -> SelfConsistentSolution:
    """Solve for κ, κ̃ and every derived quantity at (q, λ)."""
    return solve_kappa(SolveInput(covariance, kernel_s, q, lam))


def solve_kappa(inp: SolveInput) -> SelfConsistentSolution:
    cov = inp.covariance
    if inp.lam < RIDGELESS_THRESHOLD * cov.mean_eigenvalue:
        return _solve_ridgeless(inp)
    kappa, iters, method = _kappa_root(inp)
    ev = cov.eigenvalues
    d1, d2 = _df1(ev, kappa), _df2(ev, kappa)
    u = inp.q * d1
    kt = solve_kappa_tilde(inp.lam, kappa, u)
    d2t = _kernel_quantities(inp.kernel_s, u, kt)
    g, S, S_t, dk, dkt = _assemble(inp, kappa, kt, d1, d2, u, d2t)
    return SelfConsistentSolution(
        inp.lam, inp.q, kappa, kt, S, S_t, d1, d2, u, d2t, g, dk, dkt,
        iterations=iters, method=method,
    )


def solve_kappa_tilde(lam: float, kappa: float, df1_tilde: float) -> float:
    """Duality: κ̃ = λ / (κ·d̃f1)."""
    return lam / (kappa * df1_tilde)


def gamma(sol: SelfConsistentSolution) -> float:
    return (sol.df2 / sol.df1) * (sol.df2_tilde / sol.df1_tilde)


def dkappa_dlambda(sol: SelfConsistentSolution) -> float:
    if sol.gamma >= 1:
        raise SolverError("singular derivative: gamma >= 1", sol.gamma)
    return sol.dkappa_dlambda


def dkappa_tilde_dlambda(sol: SelfConsistentSolution) -> float:
    if sol.gamma >= 1:
        raise SolverError("singular derivative: gamma >= 1", sol.gamma)
    return sol.dkappa_tilde_dlambda


def empirical_kappa(df1_hat: float, q: float, lam: float, kernel_s: STransform) -> tuple[float, float]:
    """Data-driven κ and κ̃ from the measured df1_Σ̂(λ)."""
    u = q * df1_hat
    if u >= 1:
        raise SolverError(f"q*df1 = {u:g} >= 1, estimator undefined at this lambda", u)
    kappa = lam * kernel_s(u) / (1.0 - u)
    return kappa, lam / (kappa * u)


def richardson_derivative(f: Callable[[float], float], x: float, h: float) -> float:
    """Central difference with one Richardson level (error O(h⁴))."""
    d1 = (f(x + h) - f(x - h)) / (2 * h)
    d2 = (f(x + h / 2) - f(x - h / 2)) / h
    return (4 * d2 - d1) / 3


@dataclass(frozen=True, slots=True)
class IdentityReport:
    duality: float
    one_point: float
    s_tilde: float
    duality2: float
    delta_df: float

    @property
    def max_residual(self) -> float:
        return max(abs(v) for v in (self.duality, self.one_point, self.s_tilde, self.duality2, self.delta_df))


def _rel(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / scale


def verify_identities(
    sol: SelfConsistentSolution, covariance: SpectralCovariance, kernel_s: STransform
) -> IdentityReport:
    """Relative residuals of the duality and derivative identities at a solved point.

    κ̃ is recomputed independently of the duality (from S_K or the kernel
    spectrum) so that the duality residual also measures the fixed point.
    """
    u, lam, q = sol.df1_tilde, sol.lam, sol.q
    if sol.regime != "ridge":
        if sol.regime == "ridgeless_overparameterized":
            # λ/(κκ̃) → d̃f1 = 1 with κ̃ ≈ λ S̃ and S̃ = 1/κ.
            dual = _rel(sol.kappa * sol.S_tilde, 1.0 / u)
            return IdentityReport(dual, _rel(u, q * sol.df1), 0.0, 0.0, 0.0)
        if sol.regime == "ridgeless_underparameterized":
            kt_ind = (1.0 - q) / (q * kernel_s(q))
            return IdentityReport(_rel(sol.kappa_tilde, kt_ind), _rel(u, q * sol.df1), 0.0, 0.0, 0.0)
        return IdentityReport(math.inf, math.inf, math.inf, math.inf, math.inf)

    if kernel_s.spectrum is not None:
        kt_ind = inverse_df1(kernel_s.spectrum, u)
    else:
        kt_ind = (1.0 - u) / (u * kernel_s(u))
    duality = _rel(sol.kappa * kt_ind / lam, 1.0 / u)
    one_point = _rel(u, q * float(np.mean(covariance.eigenvalues / (covariance.eigenvalues + sol.kappa))))

    # S̃ = S_Σ(df1)/(q - u) with S_Σ(df1) = (1 - df1)/(df1 κ).
    s_sigma = (1.0 - sol.df1) / (sol.df1 * sol.kappa)
    s_tilde = _rel(sol.S_tilde, s_sigma / (q - u))

    dlogk = lam * sol.dkappa_dlambda / sol.kappa
    dlogkt = lam * sol.dkappa_tilde_dlambda / sol.kappa_tilde
    # df2 of the sample covariance, from d df1_Σ̂/dλ = (df2_Σ̂ - df1)/λ and the chain rule.
    df2_hat = sol.df1 + (lam / sol.kappa) * (sol.df2 - sol.df1) * sol.dkappa_dlambda
    duality2 = _rel(dlogk + dlogkt, 1.0 + (sol.df1 - df2_hat) / sol.df1)
    delta_df = _rel(q * (sol.df2 - sol.df1), (dlogkt / dlogk) * (sol.df2_tilde - sol.df1_tilde))
    return IdentityReport(duality, one_point, s_tilde, duality2, delta_df)
