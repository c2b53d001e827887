"""Spectral and matrix primitives.

Feature covariances are stored as a spectrum plus teacher components in the
eigenbasis; sample correlation kernels are materialized as dense Toeplitz
matrices with a lazily cached eigendecomposition.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigvalsh_tridiagonal, toeplitz

__all__ = [
    "InvalidKernelError",
    "NotPSDError",
    "SpectralCovariance",
    "CorrelationKernel",
    "DenseSPD",
    "identity_covariance",
    "powerlaw_covariance",
    "build_kernel_matrix",
    "kernel_eigenvalues",
    "autocorrelation",
    "psd_sqrt",
    "df1",
    "df2",
    "df_cross",
    "dirichlet_eta",
    "powerlaw_symbol_min",
    "weighted_loss_transform",
]

KERNEL_FAMILIES = ("identity", "exponential", "nearest_neighbor", "power_law", "explicit")


class InvalidKernelError(ValueError):
    """Kernel family or parameter outside its valid range."""


class NotPSDError(ValueError):
    """Matrix has an eigenvalue that is clearly negative."""


@dataclass(frozen=True)
class SpectralCovariance:
    """Feature covariance given by its eigenvalues and the teacher in that basis."""

    eigenvalues: NDArray[np.float64]
    teacher: NDArray[np.float64]
    alpha: float | None = None
    source: float | None = None

    def __post_init__(self) -> None:
        ev = np.asarray(self.eigenvalues, dtype=float)
        w = np.asarray(self.teacher, dtype=float)
        if ev.ndim != 1 or ev.size == 0:
            raise ValueError("eigenvalues must be a non-empty 1-d array")
        if w.shape != ev.shape:
            raise ValueError("teacher and eigenvalues must have the same length")
        if np.any(ev <= 0) or not np.all(np.isfinite(ev)):
            raise ValueError("eigenvalues must be finite and positive")
        norm = float(w @ w)
        if abs(norm - 1.0) > 1e-8:
            raise ValueError(f"teacher must have unit norm, got |w|^2={norm:.6g}")
        order = np.argsort(-ev, kind="stable")
        object.__setattr__(self, "eigenvalues", ev[order])
        object.__setattr__(self, "teacher", w[order])

    @property
    def N(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def mean_eigenvalue(self) -> float:
        return float(np.mean(self.eigenvalues))

    def teacher_weights(self) -> NDArray[np.float64]:
        """Squared teacher components w̄_k²."""
        return self.teacher**2

    def scaled(self, factor: float) -> SpectralCovariance:
        return SpectralCovariance(self.eigenvalues * factor, self.teacher, self.alpha, self.source)


def identity_covariance(N: int, teacher: ArrayLike | None = None) -> SpectralCovariance:
    """Isotropic covariance. Without a teacher the flat unit vector is used."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if teacher is None:
        w = np.full(N, 1.0 / math.sqrt(N))
    else:
        w = np.asarray(teacher, dtype=float)
        w = w / np.linalg.norm(w)
    return SpectralCovariance(np.ones(N), w)


def powerlaw_covariance(alpha: float, r: float, N: int) -> SpectralCovariance:
    """Eigenvalues k^-alpha with teacher power λ_k w̄_k² ∝ k^-(2αr+1), unit-norm teacher."""
    if alpha <= 0 or r <= 0:
        raise ValueError("alpha and r must be positive")
    if N < 1:
        raise ValueError("N must be >= 1")
    k = np.arange(1, N + 1, dtype=float)
    ev = k**-alpha
    w = k ** ((alpha - 2 * alpha * r - 1) / 2)
    w = w / np.linalg.norm(w)
    return SpectralCovariance(ev, w, alpha=alpha, source=r)


@dataclass(frozen=True)
class CorrelationKernel:
    """Stationary sample-sample correlation family of size T."""

    family: str
    T: int
    param: float | None = None
    matrix: NDArray[np.float64] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise InvalidKernelError(f"unknown kernel family {self.family!r}")
        if self.T < 1:
            raise InvalidKernelError("T must be >= 1")
        p = self.param
        if self.family == "exponential" and (p is None or not p > 0):
            raise InvalidKernelError("exponential kernel needs xi > 0")
        if self.family == "nearest_neighbor" and (p is None or not 0 <= p < 1):
            raise InvalidKernelError("nearest-neighbor kernel needs 0 <= b < 1")
        if self.family == "power_law" and (p is None or not p > 0):
            raise InvalidKernelError("power-law kernel needs chi > 0")
        if self.family == "explicit":
            if self.matrix is None:
                raise InvalidKernelError("explicit kernel needs a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (self.T, self.T):
                raise InvalidKernelError("explicit matrix must be T x T")

    def with_size(self, T: int) -> CorrelationKernel:
        if self.family == "explicit":
            raise InvalidKernelError("explicit kernels have a fixed size")
        return CorrelationKernel(self.family, T, self.param)

    @property
    def label(self) -> str:
        return self.family if self.param is None else f"{self.family}({self.param:g})"


def autocorrelation(kernel: CorrelationKernel, lags: ArrayLike) -> NDArray[np.float64]:
    """Stationary autocorrelation c(|lag|) of a Toeplitz family."""
    lag = np.abs(np.asarray(lags, dtype=float))
    fam, p = kernel.family, kernel.param
    if fam == "identity":
        return (lag == 0).astype(float)
    if fam == "exponential":
        return np.exp(-lag / p)
    if fam == "nearest_neighbor":
        return np.where(lag == 0, 1.0, np.where(lag == 1, p / 2, 0.0))
    if fam == "power_law":
        return (1.0 + lag) ** -p
    raise InvalidKernelError("explicit kernels have no stationary autocorrelation")


class DenseSPD:
    """Symmetric matrix with a lazily cached eigendecomposition."""

    def __init__(self, entries: ArrayLike, *, check: bool = True) -> None:
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        if check:
            scale = max(np.max(np.abs(a)), 1e-300)
            if np.max(np.abs(a - a.T)) > 1e-12 * scale:
                raise ValueError("matrix is not symmetric")
        self.entries = 0.5 * (a + a.T)
        self._eig: tuple[NDArray[np.float64], NDArray[np.float64]] | None = None
        self._lock = threading.Lock()

    @property
    def order(self) -> int:
        return self.entries.shape[0]

    def eigh(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Ascending eigenvalues and eigenvectors, computed once."""
        if self._eig is None:
            with self._lock:
                if self._eig is None:
                    self._eig = np.linalg.eigh(self.entries)
        return self._eig

    @property
    def eigenvalues(self) -> NDArray[np.float64]:
        return self.eigh()[0]

    def normalized_trace(self) -> float:
        return float(np.trace(self.entries)) / self.order

    def inverse_normalized_trace(self) -> float:
        """(1/T) Tr A^{-1}."""
        return float(np.mean(1.0 / self.eigenvalues))

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def build_kernel_matrix(kernel: CorrelationKernel) -> DenseSPD:
    """Dense T×T Toeplitz matrix for a kernel family (unit diagonal)."""
    if kernel.family == "identity":
        return DenseSPD(np.eye(kernel.T), check=False)
    if kernel.family == "explicit":
        return DenseSPD(kernel.matrix)
    col = autocorrelation(kernel, np.arange(kernel.T))
    return DenseSPD(toeplitz(col), check=False)


def kernel_eigenvalues(kernel: CorrelationKernel) -> NDArray[np.float64]:
    """Ascending spectrum of the T×T kernel, using structure where it exists.

    Nearest-neighbour matrices are tridiagonal Toeplitz with eigenvalues
    1 + b·cos(πk/(T+1)); the exponential kernel has a tridiagonal inverse whose
    eigenvalues need O(T) memory. Other families fall back to the dense matrix.
    """
    T, p = kernel.T, kernel.param
    if kernel.family == "identity":
        return np.ones(T)
    if kernel.family == "nearest_neighbor":
        return np.sort(1.0 + p * np.cos(np.pi * np.arange(1, T + 1) / (T + 1)))
    if kernel.family == "exponential" and T > 1:
        r = math.exp(-1.0 / p)
        d = np.full(T, 1.0 + r * r)
        d[0] = d[-1] = 1.0
        inv = eigvalsh_tridiagonal(d, np.full(T - 1, -r), lapack_driver="sterf") / (1.0 - r * r)
        return np.sort(1.0 / inv)
    return build_kernel_matrix(kernel).eigenvalues


def psd_sqrt(A: DenseSPD | ArrayLike) -> DenseSPD:
    """Principal square root via the spectral decomposition."""
    a = A if isinstance(A, DenseSPD) else DenseSPD(A)
    vals, vecs = a.eigh()
    norm = max(abs(vals[0]), abs(vals[-1]))
    if vals[0] < -1e-10 * norm:
        raise NotPSDError(f"smallest eigenvalue {vals[0]:.3e} is negative")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return DenseSPD((vecs * root) @ vecs.T, check=False)


def _spectrum(values: ArrayLike) -> NDArray[np.float64]:
    s = np.asarray(values, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("spectrum must be non-empty")
    return s


def df1(spectrum: ArrayLike, lam: float) -> float:
    """(1/N) Σ a/(a+λ)."""
    s = _spectrum(spectrum)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        if np.any(s <= 0):
            raise ValueError("lambda = 0 needs a strictly positive spectrum")
        return 1.0
    return float(np.mean(s / (s + lam)))


def df2(spectrum: ArrayLike, lam: float) -> float:
    """(1/N) Σ a²/(a+λ)²."""
    s = _spectrum(spectrum)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        if np.any(s <= 0):
            raise ValueError("lambda = 0 needs a strictly positive spectrum")
        return 1.0
    return float(np.mean((s / (s + lam)) ** 2))


def df_cross(A: DenseSPD | ArrayLike, B: DenseSPD | ArrayLike, lam: float) -> float:
    """(1/n) Tr[A B (A+λ)^{-2}].

    ``A`` may be a 1-d spectrum, in which case ``B`` is either a co-diagonal
    spectrum or a dense matrix expressed in A's eigenbasis.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    a_arr = A.entries if isinstance(A, DenseSPD) else np.asarray(A, dtype=float)
    b_arr = B.entries if isinstance(B, DenseSPD) else np.asarray(B, dtype=float)
    if a_arr.ndim == 1:
        diag_b = b_arr if b_arr.ndim == 1 else np.diag(b_arr)
        if diag_b.shape != a_arr.shape:
            raise ValueError("dimension mismatch")
        return float(np.mean(a_arr * diag_b / (a_arr + lam) ** 2))
    if a_arr.shape[0] != b_arr.shape[0]:
        raise ValueError("dimension mismatch")
    if b_arr.shape != a_arr.shape:
        raise ValueError("dense A needs a dense B of the same order")
    vals, vecs = (A if isinstance(A, DenseSPD) else DenseSPD(a_arr)).eigh()
    b_diag = np.einsum("ij,ik,kj->j", vecs, b_arr, vecs)
    return float(np.mean(vals * b_diag / (vals + lam) ** 2))


def dirichlet_eta(chi: float, terms: int = 64) -> float:
    """Dirichlet eta Σ (-1)^{n-1} n^{-χ} by the Euler-transformed (Borwein) series."""
    if chi <= 0:
        raise ValueError("chi must be positive")
    n = terms
    # Borwein's algorithm 2 coefficients d_k.
    d = np.empty(n + 1)
    acc = 0.0
    for i in range(n + 1):
        acc += n * math.factorial(n + i - 1) / (math.factorial(n - i) * math.factorial(2 * i)) * 4**i if i else 1.0
        d[i] = acc
    k = np.arange(n)
    signs = np.where(k % 2 == 0, 1.0, -1.0)
    total = np.sum(signs * (d[k] - d[n]) / (k + 1.0) ** chi)
    return float(-total / d[n])


def powerlaw_symbol_min(chi: float) -> float:
    """Minimum of the symbol of K_ts = (1+|t-s|)^-χ, attained at ω = π: 2η(χ) - 1."""
    if chi <= 0:
        raise ValueError("chi must be positive")
    return 2.0 * dirichlet_eta(chi) - 1.0


def weighted_loss_transform(
    K: DenseSPD | ArrayLike, Kprime: DenseSPD | ArrayLike, M: DenseSPD | ArrayLike
) -> tuple[DenseSPD, DenseSPD]:
    """Map a loss weighted by M to an isotropic loss: K -> M^½KM^½, K' -> M^½K'M^½."""
    k = K.entries if isinstance(K, DenseSPD) else np.asarray(K, dtype=float)
    kp = Kprime.entries if isinstance(Kprime, DenseSPD) else np.asarray(Kprime, dtype=float)
    m = M if isinstance(M, DenseSPD) else DenseSPD(M)
    if not (k.shape == kp.shape == m.entries.shape):
        raise ValueError("dimension mismatch")
    if m.eigenvalues[0] <= 0:
        raise NotPSDError("weight matrix must be positive definite")
    root = psd_sqrt(m).entries
    return DenseSPD(root @ k @ root), DenseSPD(root @ kp @ root)


def as_spectrum(values: Sequence[float] | NDArray[np.float64]) -> NDArray[np.float64]:
    return _spectrum(values)
