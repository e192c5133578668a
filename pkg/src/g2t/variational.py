"""Gaussian variational families and their closed-form expectations.

Parameters live in one flat vector ``w`` with a fixed layout:

* ``w[:d]`` is the mean ``mu``.
* Diagonal family: ``w[d:2d]`` holds the log standard deviations ``rho``.
* Cholesky family: ``w[d:]`` holds the lower triangle of the Cholesky factor
  ``L`` in row-major order ``(0,0), (1,0), (1,1), (2,0), ...``.  Diagonal
  entries are stored as ``log L_ii``; strictly-lower entries are stored raw.

Every gradient returned by this module (and by :mod:`g2t.estimators`) uses the
same layout, i.e. it is a derivative with respect to the stored values.

Functions that take ``xi`` accept either a single draw of shape ``(d,)`` or a
batch of shape ``(n, d)`` and return results with a matching leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DomainError

DIAG = "diag"
CHOLESKY = "chol"
FAMILIES = (DIAG, CHOLESKY)

_LOG_2PI = math.log(2.0 * math.pi)


def scale_size(family: str, dim: int) -> int:
    if family == DIAG:
        return dim
    if family == CHOLESKY:
        return dim * (dim + 1) // 2
    raise DomainError(f"unknown variational family {family!r}")


def flat_size(family: str, dim: int) -> int:
    """Length of the flat parameter (and gradient) vector."""
    return dim + scale_size(family, dim)


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """A Gaussian ``q_w(z) = N(mu, L L^T)`` stored as a flat vector."""

    family: str
    dim: int
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=float)
        if flat.ndim != 1 or flat.size != flat_size(self.family, self.dim):
            raise DomainError(
                f"flat vector of length {flat.size} does not match "
                f"{self.family} family of dimension {self.dim}"
            )
        object.__setattr__(self, "flat", flat)

    @classmethod
    def diagonal(cls, mean, log_std) -> "VariationalParams":
        mean = np.asarray(mean, dtype=float).ravel()
        log_std = np.asarray(log_std, dtype=float).ravel()
        if mean.shape != log_std.shape:
            raise DomainError("mean and log_std must have the same length")
        return cls(DIAG, mean.size, np.concatenate([mean, log_std]))

    @classmethod
    def cholesky(cls, mean, factor) -> "VariationalParams":
        """Build from a lower-triangular factor with strictly positive diagonal."""
        mean = np.asarray(mean, dtype=float).ravel()
        factor = np.asarray(factor, dtype=float)
        d = mean.size
        if factor.shape != (d, d):
            raise DomainError(f"factor must be {d}x{d}, got {factor.shape}")
        if np.any(np.triu(factor, 1) != 0.0):
            raise DomainError("factor must be lower triangular")
        diag = np.diag(factor)
        if np.any(diag <= 0.0):
            raise DomainError("factor diagonal must be strictly positive")
        rows, cols = np.tril_indices(d)
        packed = factor[rows, cols].copy()
        on_diag = rows == cols
        packed[on_diag] = np.log(packed[on_diag])
        return cls(CHOLESKY, d, np.concatenate([mean, packed]))

    @classmethod
    def standard(cls, dim: int, family: str = DIAG, log_scale: float = 0.0) -> "VariationalParams":
        """Zero mean and isotropic scale ``exp(log_scale)``."""
        if family == DIAG:
            return cls.diagonal(np.zeros(dim), np.full(dim, log_scale))
        return cls.cholesky(np.zeros(dim), math.exp(log_scale) * np.eye(dim))

    def with_flat(self, flat) -> "VariationalParams":
        return VariationalParams(self.family, self.dim, flat)

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def mean(self) -> np.ndarray:
        return self.flat[: self.dim]

    @cached_property
    def tril(self):
        return np.tril_indices(self.dim)

    @cached_property
    def diag_positions(self) -> np.ndarray:
        """Positions of the log-diagonal entries inside the scale block."""
        if self.family == DIAG:
            return np.arange(self.dim)
        rows, cols = self.tril
        return np.flatnonzero(rows == cols)

    @cached_property
    def scale_diag(self) -> np.ndarray:
        """Diagonal of ``L`` (the standard deviations for the diagonal family)."""
        return np.exp(self.flat[self.dim:][self.diag_positions])

    @cached_property
    def factor(self) -> np.ndarray:
        """Dense lower-triangular ``L``."""
        d = self.dim
        if self.family == DIAG:
            return np.diag(self.scale_diag)
        rows, cols = self.tril
        L = np.zeros((d, d))
        L[rows, cols] = self.flat[d:]
        L[np.diag_indices(d)] = self.scale_diag
        return L

    @cached_property
    def marginal_variances(self) -> np.ndarray:
        if self.family == DIAG:
            return self.scale_diag ** 2
        return np.sum(self.factor ** 2, axis=1)

    def covariance(self) -> np.ndarray:
        L = self.factor
        return L @ L.T


def _check_xi(params: VariationalParams, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1:] != (params.dim,) or xi.ndim > 2:
        raise DomainError(f"xi must have trailing dimension {params.dim}, got shape {xi.shape}")
    return xi


def _scale_chain(params: VariationalParams, dL: np.ndarray) -> np.ndarray:
    """Map d/dL (dense, possibly batched) onto the stored scale block."""
    if params.family == DIAG:
        return np.diagonal(dL, axis1=-2, axis2=-1) * params.scale_diag
    rows, cols = params.tril
    packed = dL[..., rows, cols]
    packed[..., params.diag_positions] *= params.scale_diag
    return packed


def transform(params: VariationalParams, xi) -> np.ndarray:
    """Reparameterization ``z = mu + L xi``."""
    xi = _check_xi(params, xi)
    if params.family == DIAG:
        return params.mean + params.scale_diag * xi
    return params.mean + xi @ params.factor.T


def pullback(params: VariationalParams, xi, grad_z) -> np.ndarray:
    """Chain rule of ``f(T_w(xi))`` from ``grad_z = grad f(z)`` to the flat layout."""
    xi = _check_xi(params, xi)
    grad_z = np.asarray(grad_z, dtype=float)
    if params.family == DIAG:
        scale = grad_z * xi * params.scale_diag
    else:
        rows, cols = params.tril
        scale = grad_z[..., rows] * xi[..., cols]
        scale[..., params.diag_positions] *= params.scale_diag
    return np.concatenate([grad_z, scale], axis=-1)


def entropy_and_grad(params: VariationalParams):
    """Closed-form entropy and its gradient (1 on every log-diagonal entry)."""
    d = params.dim
    log_diag = params.flat[d:][params.diag_positions]
    value = float(np.sum(log_diag)) + 0.5 * d * (_LOG_2PI + 1.0)
    grad = np.zeros(params.size)
    grad[d + params.diag_positions] = 1.0
    return value, grad


def _whiten(params: VariationalParams, centered: np.ndarray) -> np.ndarray:
    """Solve ``L x = centered`` for (possibly batched) centered points."""
    if params.family == DIAG:
        return centered / params.scale_diag
    return solve_triangular(params.factor, centered.T, lower=True).T


def _unwhiten_transpose(params: VariationalParams, x: np.ndarray) -> np.ndarray:
    """Solve ``L^T y = x``."""
    if params.family == DIAG:
        return x / params.scale_diag
    return solve_triangular(params.factor, x.T, lower=True, trans="T").T


def log_q_and_grad_z(params: VariationalParams, z):
    """Gaussian log density at ``z`` and its gradient ``-Sigma^{-1}(z - mu)``."""
    z = _check_xi(params, z)
    d = params.dim
    eps = _whiten(params, z - params.mean)
    log_det = float(np.sum(np.log(params.scale_diag)))
    value = -0.5 * d * _LOG_2PI - log_det - 0.5 * np.sum(eps ** 2, axis=-1)
    grad = -_unwhiten_transpose(params, eps)
    return value, grad


def path_grad_log_q(params: VariationalParams, xi) -> np.ndarray:
    """Path-only gradient of ``log q_v(T_w(xi))`` with ``v = w`` held fixed.

    At ``z = T_w(xi)`` the density gradient is ``-L^{-T} xi``; only the
    dependence through the sample path is differentiated.
    """
    xi = _check_xi(params, xi)
    grad_z = -_unwhiten_transpose(params, xi)
    return pullback(params, xi, grad_z)


@dataclass(frozen=True, eq=False)
class TaylorExpansion:
    """Second-order expansion ``u(z) = f0 + g.(z-z0) + 1/2 (z-z0)^T H (z-z0)``.

    ``hessian`` is a dense symmetric matrix.  All fields are constants with
    respect to the variational parameters.
    """

    z0: np.ndarray
    f0: float
    grad: np.ndarray
    hessian: np.ndarray

    def value(self, z) -> np.ndarray:
        dz = np.asarray(z, dtype=float) - self.z0
        return self.f0 + dz @ self.grad + 0.5 * np.sum((dz @ self.hessian) * dz, axis=-1)

    def grad_z(self, z) -> np.ndarray:
        dz = np.asarray(z, dtype=float) - self.z0
        return self.grad + dz @ self.hessian


def gaussian_quadratic_expectation_grad(params: VariationalParams, expansion: TaylorExpansion):
    """Exact ``E_q[u(Z)]`` for a quadratic ``u`` and its gradient in ``w``."""
    H = np.asarray(expansion.hessian, dtype=float)
    g = np.asarray(expansion.grad, dtype=float)
    z0 = np.asarray(expansion.z0, dtype=float)
    d = params.dim
    if H.shape != (d, d) or g.shape != (d,) or z0.shape != (d,):
        raise DomainError("expansion dimensions do not match the variational family")
    H = 0.5 * (H + H.T)
    dmu = params.mean - z0
    Hdmu = H @ dmu
    if params.family == DIAG:
        var = params.scale_diag ** 2
        trace_term = float(np.diag(H) @ var)
        scale_grad = np.diag(H) * var
    else:
        L = params.factor
        HL = H @ L
        trace_term = float(np.sum(HL * L))
        scale_grad = _scale_chain(params, HL)
    value = float(expansion.f0 + g @ dmu + 0.5 * dmu @ Hdmu + 0.5 * trace_term)
    return value, np.concatenate([g + Hdmu, scale_grad])


@dataclass(frozen=True)
class PriorBlock:
    """Latent coordinates ``indices`` carrying fixed ``N(0, std^2)`` priors."""

    indices: tuple
    std: float

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise DomainError("prior block must contain at least one coordinate")
        if not self.std > 0:
            raise DomainError("prior std must be positive")

    def log_density_and_grad(self, z):
        """Log density of the block coordinates and its z-gradient (zero off-block)."""
        z = np.asarray(z, dtype=float)
        idx = np.asarray(self.indices)
        s2 = self.std ** 2
        zi = z[..., idx]
        value = -0.5 * len(idx) * math.log(2.0 * math.pi * s2) - 0.5 * np.sum(zi ** 2, axis=-1) / s2
        grad = np.zeros_like(z)
        grad[..., idx] = -zi / s2
        return value, grad


def gaussian_prior_term_grad(params: VariationalParams, block: PriorBlock):
    """Exact ``E_q[log p_block(Z)]`` and its gradient in ``w``."""
    idx = np.asarray(block.indices)
    if idx.size == 0:
        raise DomainError("empty prior block")
    if idx.min() < 0 or idx.max() >= params.dim:
        raise DomainError("prior block index out of range")
    s2 = block.std ** 2
    mu = params.mean
    value = (
        -0.5 * idx.size * math.log(2.0 * math.pi * s2)
        - (np.sum(mu[idx] ** 2) + np.sum(params.marginal_variances[idx])) / (2.0 * s2)
    )
    mean_grad = np.zeros(params.dim)
    mean_grad[idx] = -mu[idx] / s2
    dL = np.zeros((params.dim, params.dim))
    dL[idx, :] = -params.factor[idx, :] / s2
    return float(value), np.concatenate([mean_grad, _scale_chain(params, dL)])

