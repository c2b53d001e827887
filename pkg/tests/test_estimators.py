from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrridge.covariance import CorrelationKernel, identity_covariance, powerlaw_covariance
from corrridge.estimators import (
    SingularSystemError,
    carmack_factor,
    estimate_all,
    estimate_corrgcv,
    estimate_gcv1,
    estimate_gcv2_altman,
    estimator_inputs,
    fit_ridge,
    sample_autocorrelation,
    s_from_gram_interpolated,
    s_from_stationary_fit,
)
from corrridge.experiments import DataModel, generate_dataset, mean_se, simulate_point, theory_point
from corrridge.risk_theory import estimator_asymptotics
from corrridge.selfconsistent import SolverError, solve
from corrridge.stransform import s_exponential, s_for_kernel, s_identity


def _data(N: int, T: int, fam: str = "identity", param: float | None = None, sigma: float = 0.5, seed: int = 0):
    model = DataModel(identity_covariance(N), CorrelationKernel(fam, T, param), sigma, teacher="sphere")
    return model, generate_dataset(model, seed)


def test_fit_ridge_zero_labels() -> None:
    X = np.random.default_rng(0).standard_normal((20, 5))
    fit = fit_ridge(X, np.zeros(20), 0.1)
    assert np.all(fit.w == 0) and fit.R_in == 0.0


def test_fit_ridge_scalar_hand_value() -> None:
    fit = fit_ridge(np.ones((7, 1)), np.ones(7), 1.0)
    assert fit.w[0] == pytest.approx(0.5, rel=1e-15)
    assert fit.R_in == pytest.approx(0.25, rel=1e-15)


@pytest.mark.parametrize("shape", [(30, 12), (12, 30)])
def test_fit_ridge_primal_dual_agree(shape: tuple[int, int]) -> None:
    T, N = shape
    rng = np.random.default_rng(3)
    X, y, lam = rng.standard_normal((T, N)), rng.standard_normal(T), 0.07
    primal = np.linalg.solve(X.T @ X / T + lam * np.eye(N), X.T @ y / T)
    dual = X.T @ np.linalg.solve(X @ X.T / T + lam * np.eye(T), y / T)
    w = fit_ridge(X, y, lam).w
    np.testing.assert_allclose(w, primal, rtol=1e-9)
    np.testing.assert_allclose(w, dual, rtol=1e-9)


def test_fit_ridge_singular_and_invalid() -> None:
    X = np.random.default_rng(1).standard_normal((10, 3))
    X[:, 1] = 0.0
    with pytest.raises(SingularSystemError):
        fit_ridge(X, np.ones(10), 0.0)
    with pytest.raises(ValueError):
        fit_ridge(X, np.ones(10), -1.0)
    with pytest.raises(ValueError):
        fit_ridge(X, np.ones(9), 0.1)


def test_identity_factors_coincide_exactly() -> None:
    _, ds = _data(60, 150)
    inp = estimator_inputs(ds.X, 1.0, 0.05, s_identity())
    g1 = estimate_gcv1(inp)
    assert estimate_gcv2_altman(inp) == pytest.approx(g1, rel=1e-6)
    assert estimate_corrgcv(inp).estimate == pytest.approx(g1, rel=1e-6)


@pytest.mark.parametrize("q", [0.3, 0.8])
def test_identity_kernel_estimators(q: float) -> None:
    N, lam = 400, 0.05
    model, ds = _data(N, round(N / q))
    out = estimate_all(ds.X, ds.y, lam, s_identity(), K_assumed=model.K)
    assert out["gcv2"] == pytest.approx(out["gcv1"], rel=1e-6)
    assert out["corrgcv"] == pytest.approx(out["gcv1"], rel=1e-6)
    # Carmack keeps its (1 - γ)² prefactor without correlations, so it tracks
    # its own asymptote rather than S².
    f = estimator_asymptotics(solve(model.cov, s_identity(), q, lam))
    assert out["carmack"] / out["R_in"] == pytest.approx(f.carmack, rel=2e-2)


def test_large_ridge_factor_tends_to_one() -> None:
    _, ds = _data(40, 200, "exponential", 5.0)
    lam = 1e8
    fit = fit_ridge(ds.X, ds.y, lam)
    inp = estimator_inputs(ds.X, fit.R_in, lam, s_exponential(5.0))
    res = estimate_corrgcv(inp)
    assert res.factor == pytest.approx(1.0, abs=1e-6)
    assert fit.R_in == pytest.approx(float(ds.y @ ds.y) / ds.y.size, rel=1e-6)
    assert estimate_gcv1(inp) / fit.R_in == pytest.approx(1.0, abs=1e-6)


def test_corrgcv_domain_error() -> None:
    _, ds = _data(80, 40)
    inp = estimator_inputs(ds.X, 1.0, 1e-12, s_identity())
    with pytest.raises(SolverError):
        estimate_corrgcv(inp)
    with pytest.raises(ValueError):
        estimate_corrgcv(estimator_inputs(ds.X, 1.0, 0.0, s_identity()))
    with pytest.raises(ValueError):
        estimate_corrgcv(estimator_inputs(ds.X, 1.0, 0.1))


def test_chain_intermediates_match_omniscient_solve() -> None:
    N, T, lam = 400, 1600, 1e-3
    kern = CorrelationKernel("exponential", T, 100.0)
    model = DataModel(identity_covariance(N), kern, 0.5, teacher="sphere")
    ds = generate_dataset(model, 0)
    s_k = s_for_kernel(kern, prefer="analytic")
    out = estimate_all(ds.X, ds.y, lam, s_k)
    sol = solve(model.cov, s_k, N / T, lam)
    for name in ("kappa", "kappa_tilde", "df1", "df2", "df1_tilde", "df2_tilde", "S"):
        assert out[f"chain_{name}"] == pytest.approx(getattr(sol, name), rel=5e-3), name


def test_chain_satisfies_duality() -> None:
    _, ds = _data(50, 200, "exponential", 20.0)
    inp = estimator_inputs(ds.X, 1.0, 1e-2, s_exponential(20.0))
    r = estimate_corrgcv(inp)
    assert r.df1_tilde == pytest.approx(inp.q * r.df1, rel=1e-14)
    assert r.kappa * r.kappa_tilde / inp.lam == pytest.approx(1.0 / r.df1_tilde, rel=1e-12)


def test_corrgcv_tracks_omniscient_risk_at_t400() -> None:
    model = DataModel(identity_covariance(100), CorrelationKernel("exponential", 400, 100.0), 0.5, teacher="sphere")
    _, rep = theory_point(model, 1e-3)
    recs = simulate_point(model, 1e-3, range(10), estimators=("corrgcv",))
    m, _ = mean_se([r["corrgcv"] for r in recs])
    assert abs(m - rep.R_out) / rep.R_out < 0.05


def test_baselines_fail_under_strong_correlation() -> None:
    model = DataModel(identity_covariance(100), CorrelationKernel("exponential", 400, 100.0), 0.5, teacher="sphere")
    recs = simulate_point(model, 1e-3, range(10))
    r_out = np.mean([r["R_out"] for r in recs])
    assert np.mean([r["gcv1"] for r in recs]) < 0.9 * r_out
    assert np.mean([r["gcv2"] for r in recs]) > 1.1 * r_out


@pytest.mark.parametrize("fam,param", [("identity", None), ("exponential", 1.0)])
def test_corrgcv_concentrates(fam: str, param: float | None) -> None:
    model = DataModel(identity_covariance(100), CorrelationKernel(fam, 1000, param), 0.5, teacher="sphere")
    v = np.array([r["corrgcv"] for r in simulate_point(model, 1e-3, range(10), estimators=("corrgcv",), workers=4)])
    assert v.std(ddof=1) / v.mean() < 0.05


@pytest.mark.slow
def test_corrgcv_error_shrinks_with_size() -> None:
    medians = []
    for T in (250, 500, 1000, 2000):
        model = DataModel(identity_covariance(T // 2), CorrelationKernel("exponential", T, 1.0), 0.5, teacher="sphere")
        _, rep = theory_point(model, 1e-3)
        recs = simulate_point(model, 1e-3, range(40), estimators=("corrgcv",), workers=8)
        medians.append(np.median([abs(r["corrgcv"] - rep.R_out) / rep.R_out for r in recs]))
    assert all(b < a for a, b in zip(medians, medians[1:])), medians


def test_carmack_identity_matches_gcv1() -> None:
    _, ds = _data(30, 90)
    lam = 0.1
    inp = estimator_inputs(ds.X, 1.0, lam, s_identity())
    d = inp.df1_gram(lam)
    # With K = I the correction is 2Tr H - Tr H², so Carmack exceeds GCV1.
    h = np.linalg.eigvalsh(ds.X @ ds.X.T / 90)
    h = h / (h + lam)
    expected = 1.0 / (1.0 - (2 * h.sum() - (h * h).sum()) / 90) ** 2
    assert carmack_factor(ds.X, lam, np.eye(90)) == pytest.approx(expected, rel=1e-12)
    assert carmack_factor(ds.X, lam, np.eye(90)) > 1.0 / (1.0 - d) ** 2
    with pytest.raises(ValueError):
        carmack_factor(ds.X, lam, np.eye(89))


def test_sample_autocorrelation_matches_direct_sum() -> None:
    X = np.random.default_rng(5).standard_normal((50, 4))
    c = sample_autocorrelation(X, 5)
    direct = np.array([np.sum(X[: 50 - k] * X[k:]) for k in range(6)])
    np.testing.assert_allclose(c, direct / direct[0], rtol=1e-12)


def test_stationary_provenance_recovers_exponential_s() -> None:
    kern = CorrelationKernel("exponential", 2000, 10.0)
    ds = generate_dataset(DataModel(identity_covariance(500), kern, 0.0), 0)
    s_fit, s_true = s_from_stationary_fit(ds.X), s_for_kernel(kern, prefer="analytic")
    for df in (0.1, 0.3, 0.5, 0.8):
        assert s_fit(df) == pytest.approx(s_true(df), rel=2e-2)


def test_gram_provenance_recovers_s_for_isotropic_features() -> None:
    kern = CorrelationKernel("exponential", 2000, 10.0)
    ds = generate_dataset(DataModel(identity_covariance(500), kern, 0.0), 0)
    s_fit, s_true = s_from_gram_interpolated(ds.X), s_for_kernel(kern, prefer="analytic")
    for df in (0.05, 0.1, 0.2):
        assert s_fit(df) == pytest.approx(s_true(df), rel=5e-3)


@given(st.floats(0.2, 3.0), st.floats(1e-3, 10.0), st.integers(0, 2**31))
def test_estimator_inputs_df_bounds(q: float, lam: float, seed: int) -> None:
    N = 40
    X = np.random.default_rng(seed).standard_normal((max(2, round(N / q)), N))
    inp = estimator_inputs(X, 1.0, lam)
    d1, d2 = inp.df1_sigma_hat(lam), inp.df2_sigma_hat(lam)
    assert 0 <= d2 <= d1 <= 1
    assert inp.df1_gram(lam) == pytest.approx(inp.q * d1, rel=1e-12)
    assert inp.gram_spectrum().size == inp.T


def test_powerlaw_features_estimate_is_finite() -> None:
    model = DataModel(powerlaw_covariance(1.5, 0.6, 80), CorrelationKernel("exponential", 300, 10.0), 0.3)
    ds = generate_dataset(model, 2)
    out = estimate_all(ds.X, ds.y, 1e-2, s_exponential(10.0), K_assumed=model.K)
    assert all(np.isfinite(v) and v > 0 for k, v in out.items() if not k.startswith("chain_d"))
