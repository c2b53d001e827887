from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrridge.covariance import (
    CorrelationKernel,
    SpectralCovariance,
    identity_covariance,
    kernel_eigenvalues,
    powerlaw_covariance,
)
from corrridge.experiments import DataModel, generate_dataset
from corrridge.selfconsistent import (
    SolveInput,
    empirical_kappa,
    richardson_derivative,
    ridgeless_kappa,
    solve,
    verify_identities,
)
from corrridge.stransform import (
    inverse_df1,
    s_empirical,
    s_exponential,
    s_for_kernel,
    s_identity,
    s_nearest_neighbor,
)


def _two_point_cov() -> SpectralCovariance:
    return SpectralCovariance(np.array([3.0, 1.0]), np.array([1.0, 1.0]) / math.sqrt(2))


def test_identity_quadratic_root() -> None:
    sol = solve(identity_covariance(50), s_identity(), 0.5, 1.0)
    assert sol.kappa == pytest.approx((0.5 + math.sqrt(4.25)) / 2, rel=1e-12)
    assert sol.kappa == pytest.approx(1.280776, abs=1e-6)


def test_small_q_has_no_renormalization() -> None:
    sol = solve(powerlaw_covariance(1.5, 0.5, 40), s_identity(), 1e-9, 0.3)
    assert sol.kappa == pytest.approx(0.3, rel=1e-8)
    assert sol.dkappa_dlambda == pytest.approx(1.0, rel=1e-8)


def test_identity_kernel_kappa_tilde() -> None:
    sol = solve(powerlaw_covariance(1.3, 0.6, 60), s_identity(), 0.7, 0.05)
    assert 1.0 / (1.0 + sol.kappa_tilde) == pytest.approx(sol.q * sol.df1, rel=1e-12)


def test_ridgeless_kappa_examples() -> None:
    assert ridgeless_kappa(identity_covariance(10), 2.0) == pytest.approx(1.0, rel=1e-12)
    assert ridgeless_kappa(identity_covariance(10), 4.0) == pytest.approx(3.0, rel=1e-12)
    assert ridgeless_kappa(_two_point_cov(), 2.0) == pytest.approx(math.sqrt(3.0), rel=1e-12)


def test_ridgeless_overparameterized_branch() -> None:
    sol = solve(identity_covariance(20), s_identity(), 2.0, 0.0)
    assert sol.regime == "ridgeless_overparameterized"
    assert sol.kappa == pytest.approx(1.0)
    assert sol.kappa_tilde == 0.0
    assert verify_identities(sol, identity_covariance(20), s_identity()).max_residual < 1e-12


def test_ridgeless_underparameterized_branch() -> None:
    kern = CorrelationKernel("exponential", 400, 100.0)
    s_k = s_for_kernel(kern, prefer="spectrum")
    sol = solve(identity_covariance(200), s_k, 0.5, 1e-8 * 1e-6)
    assert sol.regime == "ridgeless_underparameterized"
    assert sol.kappa == 0.0
    spec = kernel_eigenvalues(kern)
    assert float(np.mean(spec / (spec + sol.kappa_tilde))) == pytest.approx(0.5, rel=1e-12)
    assert sol.kappa_tilde == pytest.approx(inverse_df1(spec, 0.5), rel=1e-12)


def test_ridgeless_limit_is_continuous() -> None:
    cov, s_k = powerlaw_covariance(1.5, 0.5, 80), s_exponential(5.0)
    for q in (0.5, 2.0):
        a, b = solve(cov, s_k, q, 0.0), solve(cov, s_k, q, 1e-10)
        assert b.gamma == pytest.approx(a.gamma, rel=1e-4)
        assert b.dkappa_tilde_dlambda == pytest.approx(a.dkappa_tilde_dlambda, rel=1e-3)


def test_gamma_identity_kernel() -> None:
    sol = solve(powerlaw_covariance(1.2, 0.5, 50), s_identity(), 0.8, 0.02)
    assert sol.gamma == pytest.approx(sol.q * sol.df2, rel=1e-12)


def test_gamma_large_ridge() -> None:
    assert solve(identity_covariance(10), s_exponential(3.0), 1.0, 1e8).gamma < 1e-7


def test_correlations_reduce_gamma() -> None:
    cov = identity_covariance(100)
    corr = solve(cov, s_exponential(100.0), 1.0, 1e-3)
    unc = solve(cov, s_identity(), 1.0, 1e-3)
    assert corr.gamma < unc.gamma


def test_kappa_matches_empirical_route() -> None:
    n = 500
    cov = identity_covariance(n)
    kern = CorrelationKernel("exponential", n, 100.0)
    s_k = s_exponential(100.0)
    sol = solve(cov, s_k, 1.0, 1e-3)
    X = generate_dataset(DataModel(cov, kern, 0.0), 11).X
    sv = np.linalg.svd(X, compute_uv=False) ** 2 / n
    k_emp, _ = empirical_kappa(float(np.mean(sv / (sv + 1e-3))), 1.0, 1e-3, s_k)
    assert k_emp == pytest.approx(sol.kappa, rel=2e-2)


@pytest.mark.parametrize(
    "cov,s_k,q,lam",
    [
        (identity_covariance(30), s_identity(), 0.5, 1.0),
        (identity_covariance(100), s_exponential(100.0), 2.0, 1e-2),
        (powerlaw_covariance(1.8, 0.4, 100), s_nearest_neighbor(0.9), 1.5, 1e-3),
    ],
)
def test_derivatives_match_richardson(cov, s_k, q: float, lam: float) -> None:
    sol = solve(cov, s_k, q, lam)
    h = 1e-5 * lam
    fd_k = richardson_derivative(lambda x: solve(cov, s_k, q, x).kappa, lam, h)
    fd_kt = richardson_derivative(lambda x: solve(cov, s_k, q, x).kappa_tilde, lam, h)
    assert sol.dkappa_dlambda == pytest.approx(fd_k, rel=1e-6)
    assert sol.dkappa_tilde_dlambda == pytest.approx(fd_kt, rel=1e-6)


def test_kappa_tilde_derivative_chain_rule_identity_kernel() -> None:
    cov, q, lam = identity_covariance(30), 0.5, 1.0

    def kt(x: float) -> float:
        s = solve(cov, s_identity(), q, x)
        return x / (s.kappa * q * s.df1)

    sol = solve(cov, s_identity(), q, lam)
    assert sol.dkappa_tilde_dlambda == pytest.approx(richardson_derivative(kt, lam, 1e-5), rel=1e-8)


def test_identity_residuals_identity_case() -> None:
    cov = identity_covariance(40)
    sol = solve(cov, s_identity(), 0.6, 0.2)
    assert verify_identities(sol, cov, s_identity()).max_residual < 1e-10


def test_perturbed_kappa_is_flagged() -> None:
    cov, s_k = identity_covariance(40), s_exponential(10.0)
    sol = solve(cov, s_k, 1.5, 0.01)
    bad = dataclasses.replace(sol, kappa=sol.kappa * 1.01)
    assert verify_identities(sol, cov, s_k).duality < 1e-10
    assert verify_identities(bad, cov, s_k).duality > 1e-3


def test_solution_json_roundtrip() -> None:
    sol = solve(identity_covariance(5), s_identity(), 2.0, 0.0)
    rec = json.loads(sol.to_json())
    assert rec["regime"] == "ridgeless_overparameterized"
    assert set(rec) == {f.name for f in dataclasses.fields(sol)}


def test_solve_input_validation() -> None:
    with pytest.raises(ValueError):
        SolveInput(identity_covariance(3), s_identity(), 0.0, 1.0)
    with pytest.raises(ValueError):
        SolveInput(identity_covariance(3), s_identity(), 1.0, -1.0)


def test_interpolation_threshold_is_divergent() -> None:
    sol = solve(identity_covariance(10), s_identity(), 1.0, 0.0)
    assert sol.divergent


families = st.sampled_from(["identity", "exponential", "nearest_neighbor", "empirical"])


def _kernel_s(family: str, p: float):
    if family == "identity":
        return s_identity()
    if family == "exponential":
        return s_exponential(0.1 + 100 * p)
    if family == "nearest_neighbor":
        return s_nearest_neighbor(0.95 * p)
    return s_empirical(kernel_eigenvalues(CorrelationKernel("power_law", 64, 0.2 + 2 * p)))


@given(families, st.floats(0.0, 1.0), st.floats(0.1, 10.0), st.floats(1e-4, 10.0), st.floats(1.1, 2.5))
def test_identities_hold(family: str, p: float, q: float, lam: float, alpha: float) -> None:
    cov = powerlaw_covariance(alpha, 0.5, 60)
    s_k = _kernel_s(family, p)
    sol = solve(cov, s_k, q, lam)
    assert sol.converged
    assert verify_identities(sol, cov, s_k).max_residual < 1e-8
    assert 0.0 <= sol.gamma < 1.0


@given(families, st.floats(0.0, 1.0), st.floats(0.1, 10.0), st.floats(1e-4, 10.0))
def test_correlations_increase_kappa(family: str, p: float, q: float, lam: float) -> None:
    cov = identity_covariance(50)
    corr = solve(cov, _kernel_s(family, p), q, lam)
    unc = solve(cov, s_identity(), q, lam)
    assert corr.kappa >= unc.kappa * (1 - 1e-10)
    assert corr.kappa_tilde <= unc.kappa_tilde * (1 + 1e-10)


@given(st.floats(0.1, 10.0), st.floats(1e-3, 1.0), st.floats(1.5, 4.0))
def test_kappa_increasing_in_ridge(q: float, lam: float, factor: float) -> None:
    cov, s_k = powerlaw_covariance(1.5, 0.5, 40), s_exponential(20.0)
    assert solve(cov, s_k, q, lam * factor).kappa > solve(cov, s_k, q, lam).kappa
