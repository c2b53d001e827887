"""Ridge regression with correlated samples: S-transforms, asymptotic risks and CorrGCV."""

from __future__ import annotations

from .covariance import CorrelationKernel, DenseSPD, SpectralCovariance, identity_covariance, powerlaw_covariance
from .estimators import estimate_all, estimate_corrgcv, estimator_inputs, fit_ridge
from .risk_theory import RiskReport, risk_matched, risk_ood
from .selfconsistent import SelfConsistentSolution, solve
from .stransform import STransform, s_for_kernel

__all__ = [
    "CorrelationKernel",
    "DenseSPD",
    "SpectralCovariance",
    "identity_covariance",
    "powerlaw_covariance",
    "STransform",
    "s_for_kernel",
    "SelfConsistentSolution",
    "solve",
    "RiskReport",
    "risk_matched",
    "risk_ood",
    "fit_ridge",
    "estimator_inputs",
    "estimate_corrgcv",
    "estimate_all",
]
