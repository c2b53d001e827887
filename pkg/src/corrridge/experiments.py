"""Monte Carlo harness: data generation, empirical risks, ensembles and trace tests."""

from __future__ import annotations

import csv
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .covariance import (
    CorrelationKernel,
    DenseSPD,
    SpectralCovariance,
    build_kernel_matrix,
    identity_covariance,
    powerlaw_covariance,
    psd_sqrt,
)
from .estimators import (
    RidgeFit,
    estimate_corrgcv,
    estimate_gcv1,
    estimate_gcv2_altman,
    estimator_inputs,
    carmack_factor,
    fit_ridge,
    s_from_gram_interpolated,
    s_from_stationary_fit,
)
from .risk_theory import (
    CorrelatedTestSpec,
    RiskReport,
    correlated_test_spec,
    estimator_asymptotics,
    ood_quantities,
    risk_correlated_test,
    risk_matched,
    risk_ood,
)
from .selfconsistent import SelfConsistentSolution, solve
from .stransform import STransform, s_for_kernel

__all__ = [
    "CSV_COLUMNS",
    "OUTPUT_SOURCES",
    "CSVSink",
    "stream_rng",
    "DataModel",
    "Dataset",
    "ExperimentConfig",
    "generate_dataset",
    "estimation_s",
    "empirical_risks",
    "mean_se",
    "simulate_point",
    "variance_decomposition",
    "variance_decomposition_mc",
    "conditional_test_risk",
    "sample_correlated_test",
    "TraceTestRow",
    "trace_test_two_point",
    "theory_point",
    "run_sweep",
]

CSV_COLUMNS = (
    "family", "kernel_params", "N", "T", "q", "lambda", "sigma_eps", "tau", "source", "value", "stderr", "status",
)

# Sub-stream purposes under one (seed, stream) address.
_PURPOSE_Z, _PURPOSE_EPS, _PURPOSE_TEACHER, _PURPOSE_TEST = 0, 1, 2, 3


def stream_rng(seed: int, stream: int, purpose: int = 0) -> np.random.Generator:
    """Counter-based generator addressed by (seed, stream, purpose); order independent."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


class DataModel:
    """Matrix-Gaussian design X = K^½ Z Σ^½ with noise ε ~ N(0, σ²K')."""

    def __init__(
        self,
        cov: SpectralCovariance,
        kernel: CorrelationKernel,
        sigma_eps: float,
        noise_kernel: CorrelationKernel | None = None,
        teacher: str = "fixed",
    ) -> None:
        if teacher not in ("fixed", "sphere"):
            raise ValueError("teacher must be 'fixed' or 'sphere'")
        if noise_kernel is not None and noise_kernel.T != kernel.T:
            raise ValueError("noise kernel must match the sample kernel size")
        self.cov = cov
        self.kernel = kernel
        self.noise_kernel = noise_kernel
        self.sigma_eps = float(sigma_eps)
        self.teacher = teacher
        self._lock = threading.Lock()

    @property
    def N(self) -> int:
        return self.cov.N

    @property
    def T(self) -> int:
        return self.kernel.T

    @property
    def q(self) -> float:
        return self.N / self.T

    @cached_property
    def K(self) -> DenseSPD:
        return build_kernel_matrix(self.kernel)

    @cached_property
    def K_noise(self) -> DenseSPD:
        return self.K if self.noise_kernel is None else build_kernel_matrix(self.noise_kernel)

    @cached_property
    def K_sqrt(self) -> NDArray[np.float64]:
        if self.kernel.family == "identity":
            return np.eye(self.T)
        return psd_sqrt(self.K).entries

    @cached_property
    def K_noise_sqrt(self) -> NDArray[np.float64]:
        if self.noise_kernel is None:
            return self.K_sqrt
        if self.noise_kernel.family == "identity":
            return np.eye(self.T)
        return psd_sqrt(self.K_noise).entries

    def warm(self) -> DataModel:
        """Materialize the cached factors before handing the model to worker threads."""
        with self._lock:
            _ = self.K_sqrt, self.K_noise_sqrt
        return self

    def with_size(self, T: int) -> DataModel:
        nk = None if self.noise_kernel is None else self.noise_kernel.with_size(T)
        return DataModel(self.cov, self.kernel.with_size(T), self.sigma_eps, nk, self.teacher)

    def theory_s(self, prefer: str = "spectrum") -> STransform:
        return s_for_kernel(self.kernel, prefer=prefer)


@dataclass(frozen=True)
class Dataset:
    X: NDArray[np.float64]
    y: NDArray[np.float64]
    eps: NDArray[np.float64]
    w: NDArray[np.float64]
    seed: int
    stream_id: int

    @property
    def y_clean(self) -> NDArray[np.float64]:
        return self.y - self.eps


def generate_dataset(model: DataModel, seed: int, stream: int = 0) -> Dataset:
    T, N = model.T, model.N
    z = stream_rng(seed, stream, _PURPOSE_Z).standard_normal((T, N))
    X = (model.K_sqrt @ z) * np.sqrt(model.cov.eigenvalues)
    if model.teacher == "sphere":
        g = stream_rng(seed, stream, _PURPOSE_TEACHER).standard_normal(N)
        w = g / np.linalg.norm(g)
    else:
        w = model.cov.teacher.copy()
    if model.sigma_eps > 0:
        e = stream_rng(seed, stream, _PURPOSE_EPS).standard_normal(T)
        eps = model.sigma_eps * (model.K_noise_sqrt @ e)
    else:
        eps = np.zeros(T)
    y = X @ w + eps
    return Dataset(X, y, eps, w, seed, stream)


def generalization_error(w_true: NDArray[np.float64], w_hat: NDArray[np.float64], cov: SpectralCovariance) -> float:
    d = w_true - w_hat
    return float(np.sum(cov.eigenvalues * d * d))


def empirical_risks(dataset: Dataset, fit: RidgeFit, cov: SpectralCovariance, sigma_eps_sq: float) -> RiskReport:
    """R_g from the exact quadratic form, R_in from the residuals; components left undefined."""
    rg = generalization_error(dataset.w, fit.w, cov)
    nan = math.nan
    return RiskReport(nan, nan, nan, rg, rg + sigma_eps_sq, fit.R_in, sigma_eps_sq)


def mean_se(values: Sequence[float] | NDArray[np.float64]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def estimation_s(provenance: str, kernel: CorrelationKernel, X: NDArray[np.float64] | None = None) -> STransform:
    """S_K for the estimators: assumed family, its finite spectrum, or fitted from X."""
    if provenance in ("analytic", "spectrum"):
        return s_for_kernel(kernel, prefer=provenance)
    if X is None:
        raise ValueError(f"S_K provenance {provenance!r} needs the design matrix")
    if provenance == "stationary":
        return s_from_stationary_fit(X)
    if provenance == "gram":
        return s_from_gram_interpolated(X)
    raise ValueError(f"unknown S_K provenance {provenance!r}")


def simulate_point(
    model: DataModel,
    lam: float,
    seeds: Iterable[int],
    *,
    estimators: Sequence[str] = ("gcv1", "gcv2", "corrgcv"),
    s_provenance: str = "spectrum",
    stream: int = 0,
    taus: Sequence[int] = (),
    workers: int = 1,
) -> list[dict[str, float]]:
    """One record per seed: empirical risks, estimator values and correlated-test risks."""
    model.warm()
    specs = {tau: correlated_test_spec(model.kernel, model.K, tau) for tau in taus}
    s_shared = None if s_provenance in ("stationary", "gram") else estimation_s(s_provenance, model.kernel)

    def one(seed: int) -> dict[str, float]:
        ds = generate_dataset(model, seed, stream)
        fit = fit_ridge(ds.X, ds.y, lam)
        rep = empirical_risks(ds, fit, model.cov, model.sigma_eps**2)
        rec: dict[str, float] = {"seed": seed, "R_g": rep.R_g, "R_out": rep.R_out, "R_in": rep.R_in}
        if estimators and lam > 0:
            s_k = s_shared if s_shared is not None else estimation_s(s_provenance, model.kernel, ds.X)
            inp = estimator_inputs(ds.X, fit.R_in, lam, s_k)
            if "gcv1" in estimators:
                rec["gcv1"] = estimate_gcv1(inp)
            if "gcv2" in estimators:
                rec["gcv2"] = estimate_gcv2_altman(inp)
            if "corrgcv" in estimators:
                res = estimate_corrgcv(inp)
                rec["corrgcv"] = res.estimate
                rec["corrgcv_kappa_tilde"] = res.kappa_tilde
            if "carmack" in estimators:
                rec["carmack"] = fit.R_in * carmack_factor(ds.X, lam, model.K)
        for tau, spec in specs.items():
            rec[f"R_k_{tau}"] = conditional_test_risk(ds, fit, spec, model.cov, model.sigma_eps**2)
        return rec

    seeds = list(seeds)
    if workers <= 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, seeds))


def variance_decomposition(model: DataModel, lam: float, E: int, seed: int, stream0: int = 0) -> dict[str, float]:
    """Ensemble split of the mean R_g into Bias², Var_X and Var_Xε.

    Every dataset is fit with and without its label noise. Bias² uses the
    unbiased pairwise estimator of |E ŵ - w̄|²_Σ over the noiseless fits, so it
    carries no Var_X/E offset; Var_X is the remainder of the noiseless mean and
    Var_Xε the excess of the noisy mean. The three sum to the noisy mean.
    """
    if E < 2:
        raise ValueError("ensemble size must be >= 2")
    if model.teacher != "fixed":
        raise ValueError("the decomposition needs a fixed teacher")
    ev = model.cov.eigenvalues
    errs_clean = []
    rg_clean, rg_noisy = [], []
    for e in range(E):
        ds = generate_dataset(model, seed, stream0 + e)
        w_noisy = fit_ridge(ds.X, ds.y, lam).w
        w_clean = fit_ridge(ds.X, ds.y_clean, lam).w
        d_clean = ds.w - w_clean
        errs_clean.append(d_clean)
        rg_clean.append(float(np.sum(ev * d_clean**2)))
        rg_noisy.append(generalization_error(ds.w, w_noisy, model.cov))
    D = np.asarray(errs_clean) * np.sqrt(ev)
    s = D.sum(axis=0)
    pair_sum = float(s @ s) - float(np.sum(D * D))
    bias2 = pair_sum / (E * (E - 1))
    mean_clean = float(np.mean(rg_clean))
    total = float(np.mean(rg_noisy))
    var_x = mean_clean - bias2
    var_xeps = total - mean_clean
    return {"bias2": bias2, "var_x": var_x, "var_xeps": var_xeps, "total": total}


def variance_decomposition_mc(
    model: DataModel, lam: float, E: int, repeats: int, seed: int, workers: int = 1
) -> dict[str, tuple[float, float]]:
    """Mean and standard error of each component over independent ensembles."""
    model.warm()

    def one(r: int) -> dict[str, float]:
        return variance_decomposition(model, lam, E, seed, stream0=r * E)

    if workers <= 1:
        runs = [one(r) for r in range(repeats)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(one, range(repeats)))
    return {k: mean_se([run[k] for run in runs]) for k in runs[0]}


def conditional_test_risk(
    dataset: Dataset, fit: RidgeFit, spec: CorrelatedTestSpec, cov: SpectralCovariance, sigma_eps_sq: float
) -> float:
    """Exact E[(y - xᵀŵ)² | X, ε] for a test point with x|X ~ N(Xᵀα, (1-ρ)Σ)."""
    mean = float(spec.alpha @ fit.residual)
    rg = generalization_error(dataset.w, fit.w, cov)
    return mean * mean + (1.0 - spec.rho) * (rg + sigma_eps_sq)


def sample_correlated_test(
    dataset: Dataset,
    fit: RidgeFit,
    spec: CorrelatedTestSpec,
    cov: SpectralCovariance,
    sigma_eps_sq: float,
    reps: int,
) -> tuple[float, float]:
    """Average squared error over conditionally drawn test pairs (mean, standard error)."""
    if not spec.rho < 1:
        raise ValueError("degenerate test point: rho >= 1")
    rng = stream_rng(dataset.seed, dataset.stream_id, _PURPOSE_TEST)
    sd = math.sqrt(1.0 - spec.rho)
    x_mean = dataset.X.T @ spec.alpha
    e_mean = float(spec.alpha @ dataset.eps)
    z = rng.standard_normal((reps, cov.N)) * np.sqrt(cov.eigenvalues)
    x = x_mean + sd * z
    e = e_mean + sd * math.sqrt(sigma_eps_sq) * rng.standard_normal(reps)
    err = x @ (dataset.w - fit.w) + e
    return mean_se(err**2)


@dataclass(frozen=True, slots=True)
class TraceTestRow:
    name: str
    lhs: float
    lhs_se: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs) / abs(self.rhs)


def trace_test_two_point(
    cov: SpectralCovariance,
    kernel: CorrelationKernel,
    lam: float,
    seeds: Iterable[int],
    sigma_prime: NDArray[np.float64] | None = None,
    noise_kernel: CorrelationKernel | None = None,
    s_prefer: str = "spectrum",
) -> list[TraceTestRow]:
    """Monte Carlo check of the one- and two-point resolvent equivalents.

    Rows compare sample averages of
      one_point:        (1/N) Tr[Σ' λ(Σ̂+λ)^{-1}]             vs (1/N) Tr[Σ' κ(Σ+κ)^{-1}]
      two_point_sigma:  (1/N) Tr[(Σ̂+λ)^{-1} Σ' (Σ̂+λ)^{-1}]    vs S²[(1/N)Tr(Σ'(Σ+κ)^{-2}) + (1/N)Tr(Σ(Σ+κ)^{-2}) γ_ΣΣ'/(1-γ)]
      two_point_noise:  (1/T²) Tr[Σ'(Σ̂+λ)^{-1}XᵀK'X(Σ̂+λ)^{-1}] vs γ_ΣΣ'KK'/(1-γ)
    with Σ' diagonal in Σ's eigenbasis.
    """
    model = DataModel(cov, kernel, 0.0, noise_kernel).warm()
    ev = cov.eigenvalues
    sp = ev if sigma_prime is None else np.asarray(sigma_prime, dtype=float)
    Kp = model.K_noise.entries
    N, T = cov.N, kernel.T
    one_pt, two_sig, two_noise = [], [], []
    for seed in seeds:
        X = generate_dataset(model, seed).X
        A = X.T @ X / T
        A[np.diag_indices(N)] += lam
        R = np.linalg.inv(A)
        R = 0.5 * (R + R.T)
        one_pt.append(lam * float(np.sum(sp * np.diag(R))) / N)
        two_sig.append(float(np.einsum("ij,j,ji->", R, sp, R)) / N)
        M = R @ (X.T @ Kp @ X) @ R
        two_noise.append(float(np.sum(sp * np.diag(M))) / T**2)
    sol = solve(cov, s_for_kernel(kernel, prefer=s_prefer), N / T, lam)
    ood = ood_quantities(sol, cov, sp, model.K, None if noise_kernel is None else model.K_noise)
    k = sol.kappa
    g = sol.gamma
    rhs_one = float(np.mean(sp * k / (ev + k)))
    rhs_sig = sol.S**2 * (float(np.mean(sp / (ev + k) ** 2)) + float(np.mean(ev / (ev + k) ** 2)) * ood.gamma_SSp / (1 - g))
    rhs_noise = ood.gamma_SSpKKp / (1 - g)
    rows = []
    for name, vals, rhs in (
        ("one_point", one_pt, rhs_one),
        ("two_point_sigma", two_sig, rhs_sig),
        ("two_point_noise", two_noise, rhs_noise),
    ):
        m, se = mean_se(vals)
        rows.append(TraceTestRow(name, m, se, rhs))
    return rows


# --------------------------------------------------------------------- sweeps

# Row sources a sweep can emit besides estimator rows; correlated-test rows
# (theory_k, theory_k_approx, empirical_k) appear whenever tau_grid is set.
OUTPUT_SOURCES = (
    "theory", "theory_r_in", "bias2", "var_x", "var_xeps", "theory_factors", "empirical", "empirical_r_in",
)


@dataclass
class ExperimentConfig:
    """Declarative sweep description (see ``from_dict`` for the accepted keys)."""

    N: int = 100
    covariance: dict[str, Any] = field(default_factory=lambda: {"kind": "identity"})
    kernel: dict[str, Any] = field(default_factory=lambda: {"family": "identity"})
    noise_kernel: dict[str, Any] | None = None
    T_grid: list[int] = field(default_factory=lambda: [200])
    q_grid: list[float] | None = None
    lam_grid: list[float] = field(default_factory=lambda: [1e-3])
    sigma_eps: float = 0.5
    tau_grid: list[int] = field(default_factory=list)
    seeds: int = 10
    base_seed: int = 0
    estimators: list[str] = field(default_factory=lambda: ["gcv1", "gcv2", "corrgcv"])
    outputs: list[str] = field(default_factory=lambda: ["theory", "empirical"])
    s_provenance: str = "spectrum"
    theory_s: str = "spectrum"
    teacher: str = "fixed"
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.N < 1:
            raise ValueError("N: must be >= 1")
        if self.q_grid is not None:
            if any(not q > 0 for q in self.q_grid):
                raise ValueError("q_grid: ratios must be positive")
            # A q-grid fixes N and sets T = round(N/q).
            self.T_grid = [max(1, round(self.N / q)) for q in self.q_grid]
        if not self.T_grid:
            raise ValueError("T_grid: must be non-empty")
        if not self.lam_grid:
            raise ValueError("lam_grid: must be non-empty")
        if self.seeds < 1:
            raise ValueError("seeds: must be >= 1")
        if any(t < 1 for t in self.T_grid):
            raise ValueError("T_grid: sizes must be >= 1")
        if any(l < 0 for l in self.lam_grid):
            raise ValueError("lam_grid: ridges must be non-negative")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps: must be non-negative")
        kind = self.covariance.get("kind")
        if kind not in ("identity", "powerlaw"):
            raise ValueError("covariance.kind: must be 'identity' or 'powerlaw'")
        self.build_kernel(self.kernel, 2)
        if self.noise_kernel is not None:
            self.build_kernel(self.noise_kernel, 2)
        bad = set(self.estimators) - {"gcv1", "gcv2", "corrgcv", "carmack"}
        if bad:
            raise ValueError(f"estimators: unknown {sorted(bad)}")
        bad = set(self.outputs) - set(OUTPUT_SOURCES)
        if bad:
            raise ValueError(f"outputs: unknown {sorted(bad)}")
        if self.s_provenance not in ("analytic", "spectrum", "stationary", "gram"):
            raise ValueError(f"s_provenance: unknown value {self.s_provenance!r}")
        if self.theory_s not in ("analytic", "spectrum"):
            raise ValueError("theory_s: must be 'analytic' or 'spectrum'")

    def build_covariance(self) -> SpectralCovariance:
        c = self.covariance
        if c["kind"] == "identity":
            return identity_covariance(self.N)
        return powerlaw_covariance(float(c["alpha"]), float(c["r"]), self.N)

    @staticmethod
    def build_kernel(spec: dict[str, Any], T: int) -> CorrelationKernel:
        fam = spec.get("family")
        param = spec.get("xi", spec.get("b", spec.get("chi", spec.get("param"))))
        return CorrelationKernel(fam, T, None if param is None else float(param))

    def model(self, T: int) -> DataModel:
        nk = None if self.noise_kernel is None else self.build_kernel(self.noise_kernel, T)
        return DataModel(self.build_covariance(), self.build_kernel(self.kernel, T), self.sigma_eps, nk, self.teacher)


def theory_point(model: DataModel, lam: float, prefer: str = "spectrum") -> tuple[SelfConsistentSolution, RiskReport]:
    """Omniscient solution and risk report for one configuration."""
    sol = solve(model.cov, model.theory_s(prefer), model.q, lam)
    s2 = model.sigma_eps**2
    if model.noise_kernel is None:
        return sol, risk_matched(sol, model.cov, s2)
    return sol, risk_ood(sol, model.cov, None, model.K, model.K_noise, s2)


def _row(model: DataModel, lam: float, tau: int | None, source: str, value: float, se: float = math.nan, status: str = "ok") -> dict[str, Any]:
    kern = model.kernel
    return {
        "family": kern.family,
        "kernel_params": "" if kern.param is None else repr(kern.param),
        "N": model.N,
        "T": model.T,
        "q": model.q,
        "lambda": lam,
        "sigma_eps": model.sigma_eps,
        "tau": "" if tau is None else tau,
        "source": source,
        "value": value,
        "stderr": se,
        "status": status,
    }


def _error_row(cfg: ExperimentConfig, T: int, lam: float, exc: Exception) -> dict[str, Any]:
    # Built from the raw config so that invalid kernels or covariances still yield a row.
    spec = cfg.kernel
    param = spec.get("xi", spec.get("b", spec.get("chi", spec.get("param"))))
    return {
        "family": spec.get("family", ""),
        "kernel_params": "" if param is None else repr(float(param)),
        "N": cfg.N,
        "T": T,
        "q": cfg.N / T,
        "lambda": lam,
        "sigma_eps": cfg.sigma_eps,
        "tau": "",
        "source": "theory",
        "value": math.nan,
        "stderr": math.nan,
        "status": f"error: {exc}",
    }


class CSVSink:
    """Ordered, row-atomic CSV writer (flushes after every row)."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = None if path is None else Path(path)
        self._fh = None
        self._writer = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=CSV_COLUMNS)
            self._writer.writeheader()
            self._fh.flush()

    def write(self, rows: Iterable[dict[str, Any]]) -> None:
        if self._writer is None:
            return
        for r in rows:
            self._writer.writerow(r)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _point_rows(cfg: ExperimentConfig, T: int, lam: float, with_mc: bool, workers: int) -> list[dict[str, Any]]:
    model = cfg.model(T)
    want = set(cfg.outputs)
    rows: list[dict[str, Any]] = []
    sol, rep = theory_point(model, lam, cfg.theory_s)
    status = "divergent" if rep.divergent else "ok"
    for src, val in (
        ("theory", rep.R_out),
        ("theory_r_in", rep.R_in),
        ("bias2", rep.bias_sq),
        ("var_x", rep.var_X),
        ("var_xeps", rep.var_Xeps),
    ):
        if src in want:
            rows.append(_row(model, lam, None, src, val, status=status))
    if "theory_factors" in want and not rep.divergent and lam > 0 and model.noise_kernel is None:
        f = estimator_asymptotics(sol)
        for name in ("gcv1", "gcv2", "carmack", "corrgcv"):
            rows.append(_row(model, lam, None, f"theory_factor_{name}", getattr(f, name)))
    for tau in cfg.tau_grid:
        spec = correlated_test_spec(model.kernel, model.K, tau)
        res = risk_correlated_test(sol, model.K, spec, rep)
        rows.append(_row(model, lam, tau, "theory_k", res.R_out_full))
        rows.append(_row(model, lam, tau, "theory_k_approx", res.R_out_approx))
    if not with_mc:
        return rows
    seeds = [cfg.base_seed + s for s in range(cfg.seeds)]
    est = list(cfg.estimators) if lam > 0 else []
    recs = simulate_point(model, lam, seeds, estimators=est, s_provenance=cfg.s_provenance, taus=cfg.tau_grid, workers=workers)
    keys = [k for k, src in (("R_out", "empirical"), ("R_in", "empirical_r_in")) if src in want] + est
    names = {"R_out": "empirical", "R_in": "empirical_r_in"}
    for key in keys:
        m, se = mean_se([r[key] for r in recs])
        rows.append(_row(model, lam, None, names.get(key, key), m, se))
    for tau in cfg.tau_grid:
        m, se = mean_se([r[f"R_k_{tau}"] for r in recs])
        rows.append(_row(model, lam, tau, "empirical_k", m, se))
    return rows


def run_sweep(
    cfg: ExperimentConfig,
    *,
    with_mc: bool = True,
    workers: int = 1,
    sink: CSVSink | None = None,
    on_error: Callable[[Exception], None] | None = None,
) -> list[dict[str, Any]]:
    """Theory, estimator and empirical rows for every (T, λ) grid point.

    A failing grid point produces a single row with status ``error: ...`` and
    the sweep continues.
    """
    out: list[dict[str, Any]] = []
    for T in cfg.T_grid:
        for lam in cfg.lam_grid:
            try:
                rows = _point_rows(cfg, int(T), float(lam), with_mc, workers)
            except Exception as exc:  # recorded in-row; the sweep keeps going
                if on_error is not None:
                    on_error(exc)
                rows = [_error_row(cfg, int(T), float(lam), exc)]
            if sink is not None:
                sink.write(rows)
            out.extend(rows)
    return out
