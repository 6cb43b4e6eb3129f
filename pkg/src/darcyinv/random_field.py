"""Log-permeability covariance, truncated Karhunen-Loeve basis and field realisation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, EigenError, FormatError, MemoryBudgetError
from .grid import GridSpec

# Largest node count for which the dense covariance is formed (51x51 = 2601 fits).
MAX_DENSE_NODES = 4096

KLB_MAGIC = b"KLB1"
_KLB_HEADER = struct.Struct("<4sqqqddd")


@dataclass(frozen=True)
class CovarianceSpec:
    variance: float = 1.0
    corr_length: float = 100.0
    kernel: str = "exponential"

    def __post_init__(self):
        if self.kernel != "exponential":
            raise ValueError(f"unsupported covariance kernel {self.kernel!r}")
        if not (self.variance > 0 and self.corr_length > 0):
            raise ValueError("variance and correlation length must be positive")

    def __call__(self, r):
        return self.variance * np.exp(-np.asarray(r) / self.corr_length)


def covariance_matrix(grid: GridSpec, spec: CovarianceSpec, max_nodes: int = MAX_DENSE_NODES) -> np.ndarray:
    """Dense node-to-node covariance ``var * exp(-d / corr_length)``."""
    if grid.n_nodes > max_nodes:
        raise MemoryBudgetError(
            f"{grid.nx}x{grid.ny} grid needs a {grid.n_nodes}^2 dense covariance; "
            f"the cap is {max_nodes} nodes, reduce the grid"
        )
    xy = grid.coordinates()
    return spec(cdist(xy, xy))


@dataclass(frozen=True)
class KLBasis:
    """Leading eigenpairs of the log-permeability covariance.

    ``eigenvectors`` has shape ``(n_nodes, n_modes)``; column ``i`` is mode ``i``.
    ``total_variance`` is the covariance trace, used for the captured-energy
    fraction.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mean_log_k: float = 0.0
    total_variance: float | None = None
    nx: int = 0
    ny: int = 0
    variance: float = 1.0
    corr_length: float = 0.0

    def __post_init__(self):
        for name in ("eigenvalues", "eigenvectors"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        modes = self.eigenvectors * np.sqrt(self.eigenvalues)
        modes.setflags(write=False)
        object.__setattr__(self, "_modes", modes)

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_nodes(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def scaled_modes(self) -> np.ndarray:
        """``sqrt(lambda_i) * phi_i`` as columns; maps coefficients to log-k fluctuations."""
        return self._modes

    @property
    def energy_fraction(self) -> float:
        if not self.total_variance:
            return float("nan")
        return float(self.eigenvalues.sum() / self.total_variance)

    def with_mean(self, mean_log_k: float) -> "KLBasis":
        return KLBasis(
            self.eigenvalues, self.eigenvectors, float(mean_log_k), self.total_variance,
            self.nx, self.ny, self.variance, self.corr_length,
        )


def compute_kl_basis(cov: np.ndarray, n_modes: int, mean_log_k: float = 0.0, **meta) -> KLBasis:
    """Top ``n_modes`` eigenpairs of ``cov``, largest first.

    Each eigenvector is flipped so that its largest-magnitude entry is positive.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if cov.ndim != 2 or cov.shape[1] != n:
        raise DimensionMismatch(f"covariance must be square, got {cov.shape}")
    if not 1 <= n_modes <= n:
        raise DimensionMismatch(f"n_modes={n_modes} outside [1, {n}]")
    try:
        lam, vec = sla.eigh(cov, subset_by_index=[n - n_modes, n - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenError(f"eigendecomposition failed: {exc}") from exc
    lam = lam[::-1]
    vec = vec[:, ::-1]

    tol = 1e-10 * max(lam[0], 0.0)
    if lam[-1] < -tol or lam[0] <= 0:
        raise EigenError(f"retained eigenvalue {lam[-1]:.3e} is negative")
    lam = np.maximum(lam, 0.0)

    pivot = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[pivot, np.arange(n_modes)])
    vec = vec * signs

    return KLBasis(lam, vec, float(mean_log_k), float(np.trace(cov)), **meta)


def build_kl_basis(grid: GridSpec, spec: CovarianceSpec, n_modes: int, mean_log_k: float = 0.0) -> KLBasis:
    cov = covariance_matrix(grid, spec)
    return compute_kl_basis(
        cov, n_modes, mean_log_k,
        nx=grid.nx, ny=grid.ny, variance=spec.variance, corr_length=spec.corr_length,
    )


@dataclass(frozen=True)
class PermeabilityField:
    log_k: np.ndarray

    @property
    def k(self) -> np.ndarray:
        return np.exp(self.log_k)


def realize_log_permeability(basis: KLBasis, coeffs) -> PermeabilityField:
    """``log_k = mean + sum_i sqrt(lambda_i) phi_i k_i``.

    ``coeffs`` may be a single vector or a ``(batch, n_modes)`` array; the
    field then has shape ``(batch, n_nodes)``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.n_modes:
        raise DimensionMismatch(f"expected {basis.n_modes} coefficients, got {coeffs.shape[-1]}")
    return PermeabilityField(basis.mean_log_k + coeffs @ basis.scaled_modes.T)


def sample_coefficients(n_modes: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = (n_modes,) if size is None else (size, n_modes)
    return rng.standard_normal(shape)


def save_basis(basis: KLBasis, path) -> None:
    header = _KLB_HEADER.pack(
        KLB_MAGIC, basis.nx, basis.ny, basis.n_modes,
        basis.variance, basis.corr_length, basis.mean_log_k,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenvectors.T).astype("<f8").tobytes())


def load_basis(path) -> KLBasis:
    raw = Path(path).read_bytes()
    if len(raw) < _KLB_HEADER.size or raw[:4] != KLB_MAGIC:
        raise FormatError(f"{path}: not a KLB1 basis file")
    _, nx, ny, n_modes, variance, corr_length, mean = _KLB_HEADER.unpack_from(raw)
    n_nodes = nx * ny
    body = np.frombuffer(raw, dtype="<f8", offset=_KLB_HEADER.size)
    if body.size != n_modes * (1 + n_nodes):
        raise FormatError(f"{path}: truncated basis payload")
    lam = body[:n_modes].copy()
    vec = body[n_modes:].reshape(n_modes, n_nodes).T.copy()
    return KLBasis(lam, vec, mean, n_nodes * variance, nx, ny, variance, corr_length)
