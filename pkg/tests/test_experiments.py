from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrridge.covariance import CorrelationKernel, identity_covariance, powerlaw_covariance
from corrridge.estimators import fit_ridge
from corrridge.experiments import (
    CSV_COLUMNS,
    CSVSink,
    DataModel,
    ExperimentConfig,
    conditional_test_risk,
    empirical_risks,
    estimation_s,
    generate_dataset,
    mean_se,
    run_sweep,
    sample_correlated_test,
    simulate_point,
    stream_rng,
    theory_point,
    trace_test_two_point,
    variance_decomposition,
    variance_decomposition_mc,
)
from corrridge.risk_theory import CorrelatedTestSpec, correlated_test_spec, risk_correlated_test


def _model(N: int = 20, T: int = 50, fam: str = "exponential", param: float | None = 5.0, sigma: float = 0.5, **kw):
    return DataModel(identity_covariance(N), CorrelationKernel(fam, T, param), sigma, **kw)


def test_streams_are_order_independent() -> None:
    a = [stream_rng(7, s, 0).standard_normal(3) for s in (0, 1, 2)]
    b = [stream_rng(7, s, 0).standard_normal(3) for s in (2, 1, 0)][::-1]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert not np.array_equal(stream_rng(7, 0, 0).standard_normal(3), stream_rng(7, 0, 1).standard_normal(3))


def test_dataset_reproducible_across_parallelism() -> None:
    model = _model(teacher="sphere")
    serial = simulate_point(model, 0.01, range(6), workers=1)
    parallel = simulate_point(model, 0.01, range(6), workers=3)
    assert serial == parallel
    d1, d2 = generate_dataset(model, 3, stream=4), generate_dataset(model.with_size(50), 3, stream=4)
    assert np.array_equal(d1.X, d2.X) and np.array_equal(d1.y, d2.y)


def test_dataset_label_identity() -> None:
    ds = generate_dataset(_model(), 1)
    assert np.array_equal(ds.y, ds.X @ ds.w + ds.eps)
    quiet = generate_dataset(_model(sigma=0.0), 1)
    assert np.all(quiet.eps == 0) and np.array_equal(quiet.y, quiet.X @ quiet.w)


def test_sample_covariance_identity() -> None:
    ds = generate_dataset(_model(10, 5000, "identity", None), 0)
    C = ds.X.T @ ds.X / 5000
    assert np.max(np.abs(C - np.eye(10))) < 5 / math.sqrt(5000)


def test_lag_one_autocovariance_exponential() -> None:
    ds = generate_dataset(_model(10, 5000, "exponential", 10.0), 0)
    per_col = np.mean(ds.X[:-1] * ds.X[1:], axis=0)
    m, se = mean_se(per_col)
    assert abs(m - math.exp(-0.1)) < 3 * se


def test_empirical_risks_trivial_cases() -> None:
    model = _model(teacher="sphere")
    ds = generate_dataset(model, 0)
    fit = fit_ridge(ds.X, ds.y, 0.1)
    exact = type(fit)(ds.w.copy(), fit.R_in, fit.residual)
    assert empirical_risks(ds, exact, model.cov, 0.25).R_g == 0.0
    cov = powerlaw_covariance(1.5, 0.5, 20)
    zero = type(fit)(np.zeros(20), fit.R_in, fit.residual)
    rep = empirical_risks(ds, zero, cov, 0.25)
    assert rep.R_g == pytest.approx(float(np.sum(ds.w**2 * cov.eigenvalues)), rel=1e-14)
    assert rep.R_out == pytest.approx(rep.R_g + 0.25, rel=1e-14)


def test_simulation_matches_theory_at_moderate_size() -> None:
    N = 500
    model = DataModel(identity_covariance(N), CorrelationKernel("identity", 2 * N), 1.0, teacher="sphere")
    _, rep = theory_point(model, 1.0)
    m, se = mean_se([r["R_out"] for r in simulate_point(model, 1.0, range(10), estimators=(), workers=4)])
    assert abs(m - rep.R_out) < 3 * se


def test_decomposition_sums_exactly() -> None:
    model = _model(40, 80, sigma=0.5)
    d = variance_decomposition(model, 1e-2, 6, seed=3)
    assert d["bias2"] + d["var_x"] + d["var_xeps"] == pytest.approx(d["total"], rel=1e-12)


def test_decomposition_noiseless_has_no_noise_variance() -> None:
    d = variance_decomposition(_model(40, 80, sigma=0.0), 1e-2, 4, seed=3)
    assert abs(d["var_xeps"]) < 1e-12


def test_decomposition_preconditions() -> None:
    with pytest.raises(ValueError):
        variance_decomposition(_model(), 0.1, 1, seed=0)
    with pytest.raises(ValueError):
        variance_decomposition(_model(teacher="sphere"), 0.1, 3, seed=0)


def test_decomposition_bias_matches_theory() -> None:
    cov = powerlaw_covariance(1.5, 0.8, 100)
    model = DataModel(cov, CorrelationKernel("exponential", 300, 20.0), 0.5)
    _, rep = theory_point(model, 1e-2)
    mc = variance_decomposition_mc(model, 1e-2, 10, 10, seed=11, workers=4)
    for key, th in (("bias2", rep.bias_sq), ("var_x", rep.var_X), ("var_xeps", rep.var_Xeps)):
        m, se = mc[key]
        assert abs(m - th) < 3 * se, key


def test_sample_correlated_test_matches_conditional_risk() -> None:
    model = _model(20, 60, "exponential", 10.0, teacher="sphere")
    ds = generate_dataset(model, 0)
    fit = fit_ridge(ds.X, ds.y, 0.05)
    spec = correlated_test_spec(model.kernel, model.K, 2)
    m, se = sample_correlated_test(ds, fit, spec, model.cov, 0.25, 20000)
    assert abs(m - conditional_test_risk(ds, fit, spec, model.cov, 0.25)) < 4 * se


def test_sample_correlated_test_zero_correlation() -> None:
    model = _model(20, 60, teacher="sphere")
    ds = generate_dataset(model, 0)
    fit = fit_ridge(ds.X, ds.y, 0.05)
    spec = CorrelatedTestSpec(np.zeros(60), 0.0, np.zeros(60))
    rep = empirical_risks(ds, fit, model.cov, 0.25)
    assert conditional_test_risk(ds, fit, spec, model.cov, 0.25) == pytest.approx(rep.R_out, rel=1e-14)
    m, se = sample_correlated_test(ds, fit, spec, model.cov, 0.25, 20000)
    assert abs(m - rep.R_out) < 4 * se
    with pytest.raises(ValueError):
        sample_correlated_test(ds, fit, CorrelatedTestSpec(np.zeros(60), 1.0, np.zeros(60)), model.cov, 0.25, 10)


def test_correlated_test_risk_rises_with_horizon() -> None:
    N, T, lam = 100, 300, 1e-3
    model = DataModel(identity_covariance(N), CorrelationKernel("exponential", T, 100.0), 0.5, teacher="sphere")
    sol, rep = theory_point(model, lam)
    recs = simulate_point(model, lam, range(100), estimators=(), taus=(1, 10, 50), workers=4)
    means = [mean_se([r[f"R_k_{t}"] for r in recs]) for t in (1, 10, 50)]
    assert means[0][0] < means[1][0] < means[2][0] < np.mean([r["R_out"] for r in recs])
    for t, (m, se) in zip((1, 10, 50), means):
        th = risk_correlated_test(sol, model.K, correlated_test_spec(model.kernel, model.K, t), rep).R_out_full
        assert abs(m - th) < 3 * se


def test_trace_identities_large_ridge() -> None:
    rows = trace_test_two_point(powerlaw_covariance(1.3, 0.5, 60), CorrelationKernel("exponential", 80, 5.0), 1e4, range(3))
    by_name = {r.name: r for r in rows}
    assert by_name["one_point"].residual < 1e-3
    assert by_name["two_point_sigma"].residual < 1e-3
    # The noise trace stays a random quadratic form in X at leading order.
    noise = by_name["two_point_noise"]
    assert abs(noise.lhs - noise.rhs) < 3 * noise.lhs_se


def test_trace_identities_identity_kernel() -> None:
    rows = trace_test_two_point(identity_covariance(300), CorrelationKernel("identity", 300), 0.1, range(5))
    for row in rows:
        assert row.residual < 0.03, row


def test_trace_identities_mismatched_noise() -> None:
    cov = identity_covariance(200)
    rows = trace_test_two_point(
        cov, CorrelationKernel("exponential", 300, 10.0), 0.1, range(5),
        sigma_prime=np.linspace(0.5, 1.5, 200), noise_kernel=CorrelationKernel("identity", 300),
    )
    for row in rows:
        assert row.residual < 0.03, row


def test_estimation_s_provenance_errors() -> None:
    kern = CorrelationKernel("exponential", 30, 2.0)
    assert estimation_s("analytic", kern)(0.5) > 1
    with pytest.raises(ValueError):
        estimation_s("stationary", kern)
    with pytest.raises(ValueError):
        estimation_s("nope", kern, np.ones((30, 2)))


def test_config_validation_messages() -> None:
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"N": 10, "bogus": 1})
    with pytest.raises(ValueError, match="T_grid"):
        ExperimentConfig.from_dict({"T_grid": []})
    with pytest.raises(ValueError, match="seeds"):
        ExperimentConfig.from_dict({"seeds": 0})
    with pytest.raises(ValueError, match="covariance.kind"):
        ExperimentConfig.from_dict({"covariance": {"kind": "weird"}})
    cfg = ExperimentConfig.from_dict({"N": 100, "q_grid": [0.5, 2.0]})
    assert cfg.T_grid == [200, 50]


def test_run_sweep_single_point(tmp_path) -> None:
    cfg = ExperimentConfig.from_dict(
        {"N": 20, "T_grid": [40], "kernel": {"family": "exponential", "xi": 3.0}, "seeds": 1, "teacher": "sphere"}
    )
    sink = CSVSink(tmp_path / "out.csv")
    rows = run_sweep(cfg, sink=sink)
    sink.close()
    sources = [r["source"] for r in rows]
    assert sources == ["theory", "empirical", "gcv1", "gcv2", "corrgcv"]
    with open(tmp_path / "out.csv") as fh:
        read = list(csv.DictReader(fh))
    assert tuple(read[0]) == CSV_COLUMNS and len(read) == 5
    assert all(r["status"] == "ok" for r in read)


def test_run_sweep_records_failures() -> None:
    cfg = ExperimentConfig.from_dict({"N": 20, "T_grid": [40, 60], "seeds": 1})
    cfg.kernel = {"family": "exponential", "xi": -3.0}
    errors: list[Exception] = []
    rows = run_sweep(cfg, with_mc=False, on_error=errors.append)
    assert [r["T"] for r in rows] == [40, 60]
    assert all(r["status"].startswith("error") and "xi" in r["status"] for r in rows)
    assert len(errors) == 2


@settings(max_examples=15)
@given(st.integers(0, 2**32), st.integers(0, 50))
def test_generation_is_deterministic(seed: int, stream: int) -> None:
    model = _model(6, 12, teacher="sphere")
    a, b = generate_dataset(model, seed, stream), generate_dataset(model, seed, stream)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y) and np.array_equal(a.w, b.w)
    assert np.linalg.norm(a.w) == pytest.approx(1.0, rel=1e-12)
