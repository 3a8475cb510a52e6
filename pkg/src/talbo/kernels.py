"""Squared-exponential covariances and their reduced-rank Hilbert-space form.

Scalar-facing helpers accept floats or numpy arrays; the ``*_torch`` helpers
work on tensors and are differentiable in the kernel hyperparameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "CholeskyError",
    "DomainError",
    "HilbertBasisConfig",
    "ProductSpaceTimeKernelParams",
    "SEKernelParams",
    "approximate_kernel",
    "hilbert_basis",
    "hilbert_eigenpair",
    "hilbert_eigenvalues",
    "hilbert_features",
    "jittered_cholesky",
    "product_kernel",
    "rescale_to_domain",
    "se_gram",
    "se_kernel",
    "se_spectral_density",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)
BOUNDARY_CLAMP = 1e-9


class DomainError(ValueError):
    """Raised when a Hilbert feature is requested outside ``(-J, J)``."""


class CholeskyError(RuntimeError):
    """Raised when a factorization still fails after jitter escalation."""


@dataclass(frozen=True)
class SEKernelParams:
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self) -> None:
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise ValueError(f"variance must be positive and finite, got {self.variance}")
        if not (self.lengthscale > 0 and math.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive and finite, got {self.lengthscale}")


@dataclass(frozen=True)
class HilbertBasisConfig:
    num_features: int = 128
    domain_half_width: float = 2.55

    def __post_init__(self) -> None:
        if self.num_features < 1:
            raise ValueError("num_features must be >= 1")
        if not self.domain_half_width > 0:
            raise ValueError("domain_half_width must be positive")


@dataclass(frozen=True)
class ProductSpaceTimeKernelParams:
    spatial: SEKernelParams = SEKernelParams()
    temporal: SEKernelParams = SEKernelParams(1.0, 0.1)


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("kernel inputs must be finite")


def se_kernel(c, c_prime, params: SEKernelParams):
    """``sigma^2 exp(-(c - c')^2 / (2 l^2))`` for scalars or broadcastable arrays."""
    c = np.asarray(c, dtype=float)
    c_prime = np.asarray(c_prime, dtype=float)
    _check_finite(c, c_prime)
    r2 = (c - c_prime) ** 2
    out = params.variance * np.exp(-0.5 * r2 / params.lengthscale**2)
    return float(out) if out.ndim == 0 else out


def se_spectral_density(omega, params: SEKernelParams):
    """Spectral density of the 1-D SE kernel (angular-frequency convention)."""
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega)
    ell = params.lengthscale
    out = params.variance * ell * SQRT_2PI * np.exp(-0.5 * ell**2 * omega**2)
    return float(out) if out.ndim == 0 else out


def se_spectral_density_torch(omega: torch.Tensor, variance: torch.Tensor, lengthscale: torch.Tensor) -> torch.Tensor:
    return variance * lengthscale * SQRT_2PI * torch.exp(-0.5 * lengthscale**2 * omega**2)


def hilbert_eigenvalues(config: HilbertBasisConfig) -> np.ndarray:
    m = np.arange(1, config.num_features + 1, dtype=float)
    return (math.pi * m / (2.0 * config.domain_half_width)) ** 2


def _check_domain(c, half_width: float) -> None:
    if np.any(np.abs(np.asarray(c)) >= half_width):
        raise DomainError(f"covariate outside the open interval (-{half_width}, {half_width})")


def hilbert_eigenpair(m: int, c: float, config: HilbertBasisConfig) -> tuple[float, float]:
    """Dirichlet Laplacian eigenfunction value and eigenvalue on ``[-J, J]``."""
    if not 1 <= m <= config.num_features:
        raise ValueError(f"m must lie in [1, {config.num_features}], got {m}")
    J = config.domain_half_width
    _check_finite(c)
    _check_domain(c, J)
    phi = math.sin(math.pi * m * (c + J) / (2.0 * J)) / math.sqrt(J)
    lam = (math.pi * m / (2.0 * J)) ** 2
    return phi, lam


def hilbert_basis(c, config: HilbertBasisConfig):
    """Eigenfunction matrix ``[..., M]`` for an array or tensor of covariates."""
    J = config.domain_half_width
    if isinstance(c, torch.Tensor):
        if not torch.isfinite(c).all():
            raise ValueError("kernel inputs must be finite")
        if (c.abs() >= J).any():
            raise DomainError(f"covariate outside the open interval (-{J}, {J})")
        m = torch.arange(1, config.num_features + 1, dtype=c.dtype, device=c.device)
        return torch.sin(math.pi * m * (c[..., None] + J) / (2.0 * J)) / math.sqrt(J)
    c = np.asarray(c, dtype=float)
    _check_finite(c)
    _check_domain(c, J)
    m = np.arange(1, config.num_features + 1, dtype=float)
    return np.sin(math.pi * m * (c[..., None] + J) / (2.0 * J)) / math.sqrt(J)


def hilbert_features(c: float, params: SEKernelParams, config: HilbertBasisConfig) -> tuple[np.ndarray, np.ndarray]:
    """Basis values at ``c`` and the diagonal prior variances of their weights."""
    phi = hilbert_basis(np.asarray(c, dtype=float), config)
    prior_diag = se_spectral_density(np.sqrt(hilbert_eigenvalues(config)), params)
    return phi, np.asarray(prior_diag)


def approximate_kernel(c, c_prime, params: SEKernelParams, config: HilbertBasisConfig):
    """Reduced-rank kernel ``sum_m S_m phi_m(c) phi_m(c')`` (outer product over inputs)."""
    phi_a = hilbert_basis(np.atleast_1d(np.asarray(c, dtype=float)), config)
    phi_b = hilbert_basis(np.atleast_1d(np.asarray(c_prime, dtype=float)), config)
    s = se_spectral_density(np.sqrt(hilbert_eigenvalues(config)), params)
    return (phi_a * s) @ phi_b.T


def rescale_to_domain(values, low, high, half_width: float | None = None):
    """Affinely map ``[low, high]`` onto ``[-1, 1]``.

    When ``half_width`` is given, results are clamped just inside ``(-J, J)``.
    """
    values = np.asarray(values, dtype=float)
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    span = np.where(high > low, high - low, 1.0)
    out = 2.0 * (values - low) / span - 1.0
    if half_width is not None:
        lim = half_width - BOUNDARY_CLAMP
        out = np.clip(out, -lim, lim)
    return out


def se_gram(x1: torch.Tensor, x2: torch.Tensor, variance, lengthscale) -> torch.Tensor:
    """Isotropic SE Gram matrix between row-stacked inputs."""
    if x1.dim() == 1:
        x1 = x1[:, None]
    if x2.dim() == 1:
        x2 = x2[:, None]
    a = x1 / lengthscale
    b = x2 / lengthscale
    sq = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    return variance * torch.exp(-0.5 * sq.clamp_min(0.0))


def product_kernel(
    f1: torch.Tensor,
    t1: torch.Tensor | None,
    f2: torch.Tensor,
    t2: torch.Tensor | None,
    spatial_variance,
    spatial_lengthscale,
    temporal_lengthscale=None,
    temporal_variance=1.0,
) -> torch.Tensor:
    """``k_z(f, f') k_t(t, t')``; the temporal factor is dropped when ``t1`` is None."""
    K = se_gram(f1, f2, spatial_variance, spatial_lengthscale)
    if t1 is not None and temporal_lengthscale is not None:
        K = K * se_gram(t1.reshape(-1), t2.reshape(-1), temporal_variance, temporal_lengthscale)
    return K


def jittered_cholesky(K: torch.Tensor, max_tries: int = 6) -> torch.Tensor:
    """Plain Cholesky, then ``1e-8 * mean(diag)`` jitter doubled on each failure."""
    L, info = torch.linalg.cholesky_ex(K)
    if int(info.max()) == 0 and torch.isfinite(L).all():
        return L
    n = K.shape[-1]
    eye = torch.eye(n, dtype=K.dtype, device=K.device)
    scale = K.diagonal(dim1=-2, dim2=-1).mean().detach().abs().clamp_min(1e-12)
    jitter = 1e-8 * float(scale)
    for _ in range(max_tries + 1):
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if int(info.max()) == 0 and torch.isfinite(L).all():
            return L
        jitter *= 2.0
    raise CholeskyError(f"Cholesky failed after {max_tries} jitter doublings (last jitter {jitter / 2:.3g})")
