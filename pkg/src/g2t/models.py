"""Model log-joints over an unconstrained latent space.

All four models expose ``log p(x, z)``, its gradient and an exact
Hessian-vector product.  Positive quantities (noise and prior scales) are
latent in log-space, so ``z`` ranges over all of R^d.

Latent layouts
--------------
logreg        ``[w_0 (bias), w_1, ..., w_D]``
hier_poisson  ``[mu, log sigma_alpha, log sigma_beta, alpha_1..alpha_E, beta_1..beta_P]``
bnn_a         ``[log alpha, log tau, W1 (H x D, row-major), b1 (H), W2 (H), b2]``
bnn_b         ``[log tau, W1, b1, W2, b2]``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, gammaln

from .data import ClassificationDataset, CountTable, RegressionDataset
from .errors import DomainError, IngestionError
from .variational import PriorBlock, VariationalParams, entropy_and_grad, transform

_LOG_2PI = math.log(2.0 * math.pi)

MODEL_KINDS = ("logreg", "hier_poisson", "bnn_a", "bnn_b")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    dim: int
    log_joint: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hvp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    prior_block: Optional[PriorBlock] = None
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def hessian_vector(self, z, v) -> np.ndarray:
        if self.hvp is not None:
            return self.hvp(z, v)
        return hvp_finite_difference(self.grad, z, v)

    def hessian_matrix(self, z) -> np.ndarray:
        """Dense symmetric Hessian at ``z``; built from ``dim`` Hessian-vector products
        unless the model provides it directly."""
        z = np.asarray(z, dtype=float)
        if self.hessian is not None:
            H = self.hessian(z)
        else:
            eye = np.eye(self.dim)
            H = np.stack([self.hessian_vector(z, eye[i]) for i in range(self.dim)], axis=1)
        return 0.5 * (H + H.T)


def hvp_finite_difference(grad: Callable, z, v, h: Optional[float] = None) -> np.ndarray:
    """Central difference ``(grad(z + h v) - grad(z - h v)) / (2h)``.

    The default step is ``1e-4 * (1 + ||z||)``.
    """
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    if h is None:
        h = 1e-4 * (1.0 + float(np.linalg.norm(z)))
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    return (np.asarray(grad(z + h * v)) - np.asarray(grad(z - h * v))) / (2.0 * h)


def gaussian_only(dim: int, std: float = 1.0) -> ModelSpec:
    """A model whose log-joint is an isotropic ``N(0, std^2)`` density."""
    block = PriorBlock(tuple(range(dim)), std)
    s2 = std ** 2

    def log_joint(z):
        return float(block.log_density_and_grad(np.asarray(z, dtype=float))[0])

    def grad(z):
        return -np.asarray(z, dtype=float) / s2

    return ModelSpec(
        "gaussian", dim, log_joint, grad,
        hvp=lambda z, v: -np.asarray(v, dtype=float) / s2,
        prior_block=block,
        hessian=lambda z: -np.eye(dim) / s2,
    )


def make_model(kind: str, dataset, **hyper) -> ModelSpec:
    if kind == "logreg":
        return logistic_regression(dataset, **hyper)
    if kind == "hier_poisson":
        return hierarchical_poisson(dataset, **hyper)
    if kind in ("bnn_a", "bnn_b"):
        return bayesian_nn(dataset, variant=kind[-1], **hyper)
    raise DomainError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def logistic_regression(dataset: ClassificationDataset, prior_std: float = 1.0) -> ModelSpec:
    """Bayesian logistic regression, ``P(y = +1) = 1 / (1 + exp(w_0 + w.x))``."""
    if not isinstance(dataset, ClassificationDataset):
        raise IngestionError("logreg needs a ClassificationDataset")
    y = np.asarray(dataset.labels, dtype=float)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise IngestionError("logreg labels must be -1/+1")
    X = np.hstack([np.ones((dataset.n, 1)), dataset.dense()])
    d = X.shape[1]
    s2 = prior_std ** 2
    prior_const = -0.5 * d * math.log(2.0 * math.pi * s2)

    def log_joint(z):
        z = np.asarray(z, dtype=float)
        margins = y * (X @ z)
        return float(prior_const - 0.5 * (z @ z) / s2 - np.sum(np.logaddexp(0.0, margins)))

    def grad(z):
        z = np.asarray(z, dtype=float)
        margins = y * (X @ z)
        return -z / s2 - X.T @ (y * expit(margins))

    def curvature(z):
        p = expit(X @ np.asarray(z, dtype=float))
        return p * (1.0 - p)

    def hvp(z, v):
        v = np.asarray(v, dtype=float)
        return -v / s2 - X.T @ (curvature(z) * (X @ v))

    def hessian(z):
        return -np.eye(d) / s2 - (X.T * curvature(z)) @ X

    return ModelSpec("logreg", d, log_joint, grad, hvp,
                     PriorBlock(tuple(range(d)), prior_std), hessian)


def hierarchical_poisson(table: CountTable, hyper_std: float = 10.0) -> ModelSpec:
    """Hierarchical Poisson model for stop counts by group and precinct."""
    if not isinstance(table, CountTable):
        raise IngestionError("hier_poisson needs a CountTable")
    Y = np.asarray(table.Y, dtype=float)
    logN = np.log(np.asarray(table.N, dtype=float))
    E, P = Y.shape
    d = 3 + E + P
    h2 = hyper_std ** 2
    const = float(-np.sum(gammaln(Y + 1.0)) + np.sum(Y * logN))
    hyper_const = -1.5 * math.log(2.0 * math.pi * h2)
    ia = slice(3, 3 + E)
    ib = slice(3 + E, d)

    def unpack(z):
        z = np.asarray(z, dtype=float)
        return z[0], z[1], z[2], z[ia], z[ib]

    def rates(mu, a, b):
        return np.exp(mu + a[:, None] + b[None, :] + logN)

    def log_joint(z):
        mu, lsa, lsb, a, b = unpack(z)
        eta = mu + a[:, None] + b[None, :]
        lam = np.exp(eta + logN)
        val = hyper_const - (mu ** 2 + lsa ** 2 + lsb ** 2) / (2.0 * h2)
        val += -0.5 * E * _LOG_2PI - E * lsa - 0.5 * np.sum(a ** 2) * math.exp(-2.0 * lsa)
        val += -0.5 * P * _LOG_2PI - P * lsb - 0.5 * np.sum(b ** 2) * math.exp(-2.0 * lsb)
        val += np.sum(Y * eta - lam) + const
        return float(val)

    def grad(z):
        mu, lsa, lsb, a, b = unpack(z)
        R = Y - rates(mu, a, b)
        ka, kb = math.exp(-2.0 * lsa), math.exp(-2.0 * lsb)
        g = np.empty(d)
        g[0] = -mu / h2 + R.sum()
        g[1] = -lsa / h2 - E + ka * np.sum(a ** 2)
        g[2] = -lsb / h2 - P + kb * np.sum(b ** 2)
        g[ia] = -a * ka + R.sum(axis=1)
        g[ib] = -b * kb + R.sum(axis=0)
        return g

    def hessian(z):
        mu, lsa, lsb, a, b = unpack(z)
        lam = rates(mu, a, b)
        ka, kb = math.exp(-2.0 * lsa), math.exp(-2.0 * lsb)
        H = np.zeros((d, d))
        H[0, 0] = -1.0 / h2 - lam.sum()
        H[0, ia] = H[ia, 0] = -lam.sum(axis=1)
        H[0, ib] = H[ib, 0] = -lam.sum(axis=0)
        H[1, 1] = -1.0 / h2 - 2.0 * ka * np.sum(a ** 2)
        H[2, 2] = -1.0 / h2 - 2.0 * kb * np.sum(b ** 2)
        H[1, ia] = H[ia, 1] = 2.0 * a * ka
        H[2, ib] = H[ib, 2] = 2.0 * b * kb
        H[ia, ia] = np.diag(-ka - lam.sum(axis=1))
        H[ib, ib] = np.diag(-kb - lam.sum(axis=0))
        H[ia, ib] = -lam
        H[ib, ia] = -lam.T
        return H

    def hvp(z, v):
        mu, lsa, lsb, a, b = unpack(z)
        v = np.asarray(v, dtype=float)
        lam = rates(mu, a, b)
        ka, kb = math.exp(-2.0 * lsa), math.exp(-2.0 * lsb)
        va, vb = v[ia], v[ib]
        # Poisson part: -lam * (v_mu + v_alpha_e + v_beta_p) summed over the other axes
        S = lam * (v[0] + va[:, None] + vb[None, :])
        out = np.empty(d)
        out[0] = -v[0] / h2 - S.sum()
        out[1] = -v[1] / h2 - 2.0 * ka * np.sum(a ** 2) * v[1] + 2.0 * ka * (a @ va)
        out[2] = -v[2] / h2 - 2.0 * kb * np.sum(b ** 2) * v[2] + 2.0 * kb * (b @ vb)
        out[ia] = -ka * va + 2.0 * ka * a * v[1] - S.sum(axis=1)
        out[ib] = -kb * vb + 2.0 * kb * b * v[2] - S.sum(axis=0)
        return out

    return ModelSpec("hier_poisson", d, log_joint, grad, hvp,
                     PriorBlock((0, 1, 2), hyper_std), hessian)


def bayesian_nn(dataset: RegressionDataset, variant: str = "a", hidden: int = 50,
                hyper_std: float = 10.0, weight_std: float = 5.0) -> ModelSpec:
    """One-hidden-layer ReLU regression network.

    Variant ``a`` puts ``N(0, alpha^2)`` on every weight and bias with a shared
    latent ``log alpha ~ N(0, hyper_std^2)`` and ``log tau ~ N(0, hyper_std^2)``.
    Variant ``b`` uses fixed ``N(0, weight_std^2)`` priors for the weights,
    biases and ``log tau``.
    """
    if not isinstance(dataset, RegressionDataset):
        raise IngestionError("bnn needs a RegressionDataset")
    if variant not in ("a", "b"):
        raise DomainError("variant must be 'a' or 'b'")
    X = np.asarray(dataset.features, dtype=float)
    y = np.asarray(dataset.targets, dtype=float)
    n, p = X.shape
    H = hidden
    n_w = H * p + H + H + 1
    off = 2 if variant == "a" else 1
    d = off + n_w
    s_W1 = slice(off, off + H * p)
    s_b1 = slice(s_W1.stop, s_W1.stop + H)
    s_W2 = slice(s_b1.stop, s_b1.stop + H)
    i_b2 = s_W2.stop
    s_w = slice(off, d)
    lt_var = hyper_std ** 2 if variant == "a" else weight_std ** 2
    i_lt = 1 if variant == "a" else 0

    def unpack(z):
        return z[s_W1].reshape(H, p), z[s_b1], z[s_W2], z[i_b2]

    def forward(z):
        W1, b1, W2, b2 = unpack(z)
        pre = X @ W1.T + b1
        act = np.maximum(pre, 0.0)
        return pre, act, act @ W2 + b2

    def log_joint(z):
        z = np.asarray(z, dtype=float)
        lt = z[i_lt]
        w = z[s_w]
        _, _, yhat = forward(z)
        r = y - yhat
        val = -0.5 * n * _LOG_2PI - n * lt - 0.5 * math.exp(-2.0 * lt) * (r @ r)
        val += -0.5 * math.log(2.0 * math.pi * lt_var) - lt ** 2 / (2.0 * lt_var)
        if variant == "a":
            la = z[0]
            val += -0.5 * math.log(2.0 * math.pi * hyper_std ** 2) - la ** 2 / (2.0 * hyper_std ** 2)
            val += -0.5 * n_w * _LOG_2PI - n_w * la - 0.5 * math.exp(-2.0 * la) * (w @ w)
        else:
            val += -0.5 * n_w * math.log(2.0 * math.pi * weight_std ** 2) - (w @ w) / (2.0 * weight_std ** 2)
        return float(val)

    def grad(z):
        z = np.asarray(z, dtype=float)
        lt = z[i_lt]
        w = z[s_w]
        W1, b1, W2, b2 = unpack(z)
        pre, act, yhat = forward(z)
        r = y - yhat
        kappa = math.exp(-2.0 * lt)
        gy = kappa * r
        delta = gy[:, None] * W2[None, :] * (pre > 0)
        g = np.empty(d)
        g[s_W1] = (delta.T @ X).ravel()
        g[s_b1] = delta.sum(axis=0)
        g[s_W2] = act.T @ gy
        g[i_b2] = gy.sum()
        g[i_lt] = -n + kappa * (r @ r) - lt / lt_var
        if variant == "a":
            la = z[0]
            ka = math.exp(-2.0 * la)
            g[s_w] -= w * ka
            g[0] = -la / hyper_std ** 2 - n_w + ka * (w @ w)
        else:
            g[s_w] -= w / weight_std ** 2
        return g

    def hvp(z, v):
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        lt = z[i_lt]
        w = z[s_w]
        W1, b1, W2, b2 = unpack(z)
        V1, vb1, v2, vb2 = unpack(v)
        pre, act, yhat = forward(z)
        mask = pre > 0
        r = y - yhat
        kappa = math.exp(-2.0 * lt)
        vlt = v[i_lt]
        # forward-mode directional derivatives (R-operator)
        R_act = (X @ V1.T + vb1) * mask
        R_r = -(R_act @ W2 + act @ v2 + vb2)
        gy = kappa * r
        R_gy = -2.0 * kappa * vlt * r + kappa * R_r
        R_delta = (R_gy[:, None] * W2[None, :] + gy[:, None] * v2[None, :]) * mask
        out = np.empty(d)
        out[s_W1] = (R_delta.T @ X).ravel()
        out[s_b1] = R_delta.sum(axis=0)
        out[s_W2] = R_act.T @ gy + act.T @ R_gy
        out[i_b2] = R_gy.sum()
        out[i_lt] = -2.0 * kappa * vlt * (r @ r) + 2.0 * kappa * (r @ R_r) - vlt / lt_var
        vw = v[s_w]
        if variant == "a":
            la, vla = z[0], v[0]
            ka = math.exp(-2.0 * la)
            out[s_w] += -vw * ka + 2.0 * w * ka * vla
            out[0] = -vla / hyper_std ** 2 - 2.0 * ka * vla * (w @ w) + 2.0 * ka * (w @ vw)
        else:
            out[s_w] -= vw / weight_std ** 2
        return out

    if variant == "a":
        block = PriorBlock((0, 1), hyper_std)
    else:
        block = PriorBlock(tuple(range(d)), weight_std)
    return ModelSpec(f"bnn_{variant}", d, log_joint, grad, hvp, block)


def elbo_estimate(params: VariationalParams, model: ModelSpec, n_samples: int, seed) -> float:
    """Monte Carlo ELBO: mean reparameterized log-joint plus the exact entropy."""
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    xi = np.random.default_rng(seed).standard_normal((n_samples, params.dim))
    z = transform(params, xi)
    total = 0.0
    for zi in z:
        total += model.log_joint(zi)
    return total / n_samples + entropy_and_grad(params)[0]
