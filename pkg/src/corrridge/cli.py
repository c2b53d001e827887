"""Command-line front end: theory | simulate | estimate | validate."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import scipy
import yaml

from .covariance import (
    CorrelationKernel,
    build_kernel_matrix,
    identity_covariance,
    powerlaw_covariance,
    powerlaw_symbol_min,
)
from .estimators import estimate_all, fit_ridge
from .experiments import (
    CSVSink,
    ExperimentConfig,
    estimation_s,
    generate_dataset,
    run_sweep,
    trace_test_two_point,
)
from .risk_theory import correlated_bracket, correlated_test_spec, mismatch_bound_gap
from .selfconsistent import SolverError, richardson_derivative, solve, verify_identities
from .stransform import s_empirical, s_exponential, s_for_kernel, s_identity, s_nearest_neighbor

__all__ = ["main", "load_config", "CheckResult", "validation_checks", "WORKERS_ENV"]

WORKERS_ENV = "CORRRIDGE_WORKERS"
EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config; ``overrides`` (from flags) win over file keys."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(loaded)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<defaults>'}: {exc}") from exc


def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _versions() -> dict[str, str]:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _config_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d.pop("out", None)
    return d


def write_manifest(
    out_dir: Path, subcommand: str, config_path: str | None, resolved: dict[str, Any], outputs: Sequence[Path], wall: float
) -> Path:
    blob = json.dumps(resolved, sort_keys=True, default=str)
    manifest = {
        "subcommand": subcommand,
        "config_path": config_path,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "resolved_config": resolved,
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": wall,
        "versions": _versions(),
    }
    path = out_dir / f"{subcommand}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


# ------------------------------------------------------------------ commands


def _sweep_command(args: argparse.Namespace, with_mc: bool) -> int:
    name = "simulate" if with_mc else "theory"
    cfg = load_config(args.config, {"base_seed": args.seed})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    workers = resolve_workers(args.workers)
    t0 = time.perf_counter()
    sink = CSVSink(csv_path)
    try:
        rows = run_sweep(cfg, with_mc=with_mc, workers=workers, sink=sink)
    finally:
        sink.close()
    resolved = _config_dict(cfg)
    resolved["workers"] = workers
    resolved["seed_set"] = [cfg.base_seed + s for s in range(cfg.seeds)] if with_mc else []
    write_manifest(out_dir, name, args.config, resolved, [csv_path], time.perf_counter() - t0)
    failed = [r for r in rows if str(r["status"]).startswith("error")]
    for r in failed:
        print(f"grid point T={r['T']} lambda={r['lambda']}: {r['status']}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_theory(args: argparse.Namespace) -> int:
    return _sweep_command(args, with_mc=False)


def cmd_simulate(args: argparse.Namespace) -> int:
    return _sweep_command(args, with_mc=True)


def _jsonable(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    return v


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, {"base_seed": args.seed})
    lam = float(cfg.lam_grid[0])
    if not lam > 0:
        raise ConfigError("lam_grid: estimators need a positive lambda")
    t0 = time.perf_counter()
    if args.data is not None:
        with np.load(args.data) as f:
            if "X" not in f or "y" not in f:
                raise ConfigError(f"{args.data}: needs arrays 'X' and 'y'")
            X, y = np.asarray(f["X"], dtype=float), np.asarray(f["y"], dtype=float)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ConfigError(f"{args.data}: X must be T x N with T >= 2")
        if y.shape != (X.shape[0],):
            raise ConfigError(f"{args.data}: y must have length T = {X.shape[0]}")
        model = None
    else:
        model = cfg.model(int(cfg.T_grid[0]))
        ds = generate_dataset(model, cfg.base_seed)
        X, y = ds.X, ds.y
    T, N = X.shape
    kernel = ExperimentConfig.build_kernel(cfg.kernel, T)
    s_k = estimation_s(cfg.s_provenance, kernel, X)
    K_assumed = build_kernel_matrix(kernel) if "carmack" in cfg.estimators else None
    fit = fit_ridge(X, y, lam)
    try:
        record = estimate_all(X, y, lam, s_k, K_assumed, fit)
    except SolverError as exc:
        raise ConfigError(f"estimator domain error: {exc}") from exc
    record.update({"N": N, "T": T, "lambda": lam, "s_provenance": s_k.provenance})
    if model is not None:
        sol = solve(model.cov, s_for_kernel(kernel, prefer=cfg.theory_s), N / T, lam)
        record["omniscient"] = {k: _jsonable(v) for k, v in json.loads(sol.to_json()).items()}
        record["R_out_empirical"] = float(np.sum(model.cov.eigenvalues * (ds.w - fit.w) ** 2)) + model.sigma_eps**2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "estimate.json"
    path.write_text(json.dumps({k: _jsonable(v) for k, v in record.items()}, indent=2))
    resolved = _config_dict(cfg)
    resolved["data"] = args.data
    write_manifest(out_dir, "estimate", args.config, resolved, [path], time.perf_counter() - t0)
    return EXIT_OK


# ---------------------------------------------------------------- validation


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tolerance)

    def as_dict(self) -> dict[str, Any]:
        return {"name": self.name, "residual": self.residual, "tolerance": self.tolerance, "passed": self.passed}


def _random_instance(rng: np.random.Generator):
    fam = rng.choice(["identity", "exponential", "nearest_neighbor", "wishart_like"])
    if fam == "identity":
        s_k = s_identity()
    elif fam == "exponential":
        s_k = s_exponential(float(10 ** rng.uniform(-1, 2)))
    elif fam == "nearest_neighbor":
        s_k = s_nearest_neighbor(float(rng.uniform(0.0, 0.95)))
    else:
        s_k = s_empirical(np.exp(rng.normal(0.0, 0.7, size=64)))
    N = int(rng.integers(20, 120))
    cov = powerlaw_covariance(float(rng.uniform(1.1, 2.5)), float(rng.uniform(0.2, 1.5)), N) if rng.random() < 0.5 else identity_covariance(N)
    q = float(10 ** rng.uniform(-1, 1))
    lam = float(10 ** rng.uniform(-4, 1))
    return cov, s_k, q, lam


def identity_suite(n: int, seed: int = 0, perturb_kappa: float = 0.0) -> list[CheckResult]:
    """Duality and derivative identities at random (Σ, S_K, q, λ) instances."""
    rng = np.random.default_rng(seed)
    fields = ("duality", "one_point", "s_tilde", "duality2", "delta_df")
    worst_id = dict.fromkeys(fields, 0.0)
    worst_fd = 0.0
    for _ in range(n):
        cov, s_k, q, lam = _random_instance(rng)
        sol = solve(cov, s_k, q, lam)
        if perturb_kappa:
            sol = dataclasses.replace(sol, kappa=sol.kappa * (1.0 + perturb_kappa))
        rep = verify_identities(sol, cov, s_k)
        for f in fields:
            worst_id[f] = max(worst_id[f], abs(getattr(rep, f)))
        h = 1e-4 * lam
        fd_k = richardson_derivative(lambda x: solve(cov, s_k, q, x).kappa, lam, h)
        fd_kt = richardson_derivative(lambda x: solve(cov, s_k, q, x).kappa_tilde, lam, h)
        worst_fd = max(
            worst_fd,
            abs(fd_k - sol.dkappa_dlambda) / abs(fd_k),
            abs(fd_kt - sol.dkappa_tilde_dlambda) / abs(fd_kt),
        )
    out = [CheckResult(f"identity_{f}", worst_id[f], 1e-8) for f in fields]
    return out + [CheckResult("derivatives_vs_fd", worst_fd, 1e-6)]


def endpoint_checks(T: int, xis: Sequence[float], bs: Sequence[float]) -> list[CheckResult]:
    out = []
    for fam, params, make in (("exponential", xis, s_exponential), ("nearest_neighbor", bs, s_nearest_neighbor)):
        for p in params:
            s = make(p)
            K = build_kernel_matrix(CorrelationKernel(fam, T, p))
            tr_inv = K.inverse_normalized_trace()
            out.append(CheckResult(f"S_{fam}_{p:g}(0+)", abs(s(1e-8) - 1.0), 1e-4))
            out.append(CheckResult(f"S_{fam}_{p:g}(1)", abs(s(1.0) - tr_inv) / tr_inv, 1e-3))
    return out


def toeplitz_checks(T: int, chis: Sequence[float], tol: float) -> list[CheckResult]:
    out = [CheckResult("eta(1)=log4-1", abs(powerlaw_symbol_min(1.0) - (math.log(4.0) - 1.0)), 1e-6)]
    for chi in chis:
        lo = float(build_kernel_matrix(CorrelationKernel("power_law", T, chi)).eigenvalues.min())
        ref = powerlaw_symbol_min(chi)
        out.append(CheckResult(f"toeplitz_min_chi_{chi:g}", abs(lo - ref) / abs(ref), tol))
    return out


def trace_checks(n: int, seeds: int, tol: float) -> list[CheckResult]:
    out = []
    cases = (
        ("identity", identity_covariance(n), CorrelationKernel("identity", n)),
        ("exp100", identity_covariance(n), CorrelationKernel("exponential", n, 100.0)),
    )
    for label, cov, kern in cases:
        for row in trace_test_two_point(cov, kern, 0.1, range(seeds)):
            out.append(CheckResult(f"trace_{label}_{row.name}", row.residual, tol))
    return out


def ordering_checks() -> list[CheckResult]:
    """R^k ≤ R^{k=0} along a horizon sweep and the mismatch bound gap ≥ 0."""
    N, T, xi, lam = 100, 400, 100.0, 1e-3
    kern = CorrelationKernel("exponential", T, xi)
    K = build_kernel_matrix(kern)
    sol = solve(identity_covariance(N), s_for_kernel(kern, prefer="spectrum"), N / T, lam)
    worst_bracket = max(correlated_bracket(sol, K, correlated_test_spec(kern, K, tau)) for tau in range(1, 51))
    gap = min(mismatch_bound_gap(K, kt) for kt in (0.0, 1e-3, 1e-1, 1.0, 10.0))
    return [CheckResult("bracket<=1", max(worst_bracket - 1.0, 0.0), 0.0), CheckResult("mismatch_gap>=0", max(-gap, 0.0), 1e-12)]


def validation_checks(level: str = "fast", perturb_kappa: float = 0.0) -> list[CheckResult]:
    if level not in ("fast", "full"):
        raise ConfigError("level must be 'fast' or 'full'")
    full = level == "full"
    checks: list[Callable[[], list[CheckResult]]] = [
        lambda: identity_suite(1000 if full else 100, perturb_kappa=perturb_kappa),
        lambda: endpoint_checks(4096 if full else 1024, (0.1, 1.0, 10.0, 100.0) if full else (0.1, 1.0, 10.0), (0.1, 0.5, 0.95) if full else (0.1, 0.5)),
        lambda: toeplitz_checks(4096, (0.3, 0.5, 1.0, 2.0), 1e-2) if full else toeplitz_checks(1024, (1.0, 2.0), 1e-2),
        ordering_checks,
    ]
    if full:
        checks.append(lambda: trace_checks(500, 10, 0.03))
    results: list[CheckResult] = []
    for c in checks:
        results.extend(c())
    return results


def cmd_validate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    results = validation_checks(args.level, args.perturb_kappa)
    report = {"level": args.level, "checks": [r.as_dict() for r in results], "passed": all(r.passed for r in results)}
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} residual={r.residual:.3e} tol={r.tolerance:.1e}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "validate.json"
        path.write_text(json.dumps(report, indent=2))
        resolved = {"level": args.level, "perturb_kappa": args.perturb_kappa}
        write_manifest(out_dir, "validate", None, resolved, [path], time.perf_counter() - t0)
    return EXIT_OK if report["passed"] else EXIT_INVALID


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrridge", description="Ridge regression with correlated samples.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, need_config: bool) -> None:
        sp.add_argument("--config", required=need_config, help="YAML or JSON config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--workers", type=int, default=None, help=f"worker threads (default: ${WORKERS_ENV} or all cores)")
        sp.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")

    for name, fn, helptext in (
        ("theory", cmd_theory, "omniscient risk curves over the config grid"),
        ("simulate", cmd_simulate, "Monte Carlo sweep with theory and estimator rows"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp, True)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("estimate", help="all estimators on one dataset")
    common(sp, True)
    sp.add_argument("--data", default=None, help=".npz file with arrays X (T x N) and y (T)")
    sp.set_defaults(func=cmd_estimate)
    sp = sub.add_parser("validate", help="identity, endpoint, Toeplitz, ordering and trace checks")
    common(sp, False)
    sp.set_defaults(out=None)
    sp.add_argument("--level", choices=("fast", "full"), default="fast")
    sp.add_argument("--perturb-kappa", type=float, default=0.0, help="relative κ offset injected to exercise the detector")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
