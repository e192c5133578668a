"""Reparameterization gradient estimators of the ELBO and their control variates.

Estimators return gradients of the ELBO (an ascent direction) in the flat
layout of :mod:`g2t.variational`.  Functions taking ``xi`` accept one draw
``(d,)`` or a batch ``(n, d)``.

Control variates
----------------
c1  path-only reparameterized entropy term minus its exact value
c2  second-order Taylor control variate, expansion frozen at ``z0``
c3  reparameterized fixed-Gaussian prior term minus its exact value
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, UnavailableControlVariate
from .models import ModelSpec
from .variational import (
    TaylorExpansion,
    VariationalParams,
    entropy_and_grad,
    gaussian_prior_term_grad,
    gaussian_quadratic_expectation_grad,
    path_grad_log_q,
    pullback,
    transform,
)

CONTROL_VARIATES = ("c1", "c2", "c3")


def _model_grad(model: ModelSpec, z: np.ndarray) -> np.ndarray:
    if z.ndim == 1:
        return np.asarray(model.grad(z), dtype=float)
    return np.stack([model.grad(zi) for zi in z])


def log_p_term(params: VariationalParams, model: ModelSpec, xi) -> np.ndarray:
    """Reparameterized gradient of ``log p(x, T_w(xi))``."""
    z = transform(params, xi)
    return pullback(params, xi, _model_grad(model, z))


def base_rep(params: VariationalParams, model: ModelSpec, xi) -> np.ndarray:
    """Reparameterized log-joint term plus the exact entropy gradient."""
    _, dH = entropy_and_grad(params)
    return log_p_term(params, model, xi) + dH


def stl(params: VariationalParams, model: ModelSpec, xi) -> np.ndarray:
    """Sticking-the-landing: drop the score term of the entropy gradient."""
    return log_p_term(params, model, xi) - path_grad_log_q(params, xi)


def cv_c1(params: VariationalParams, xi) -> np.ndarray:
    _, dH = entropy_and_grad(params)
    # the exact entropy-term gradient is -dH
    return path_grad_log_q(params, xi) + dH


def taylor_expansion(model: ModelSpec, z0) -> TaylorExpansion:
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (model.dim,):
        raise DomainError(f"expansion point must have dimension {model.dim}")
    return TaylorExpansion(
        z0.copy(), float(model.log_joint(z0)), np.asarray(model.grad(z0), dtype=float),
        model.hessian_matrix(z0),
    )


def cv_c2(params: VariationalParams, model: Optional[ModelSpec], xi, z0=None,
          expansion: Optional[TaylorExpansion] = None) -> np.ndarray:
    """Taylor control variate ``grad E_q u(Z) - grad u(T_w(xi))``.

    ``expansion`` takes precedence; otherwise one is built at ``z0`` (default:
    the current mean).  Both terms use the same frozen coefficients, which
    makes the control variate mean-zero whatever the Hessian accuracy.
    """
    if expansion is None:
        if model is None:
            raise DomainError("cv_c2 needs a model or a precomputed expansion")
        expansion = taylor_expansion(model, params.mean if z0 is None else z0)
    if expansion.z0.shape != (params.dim,):
        raise DomainError("expansion dimension does not match the variational family")
    _, exact = gaussian_quadratic_expectation_grad(params, expansion)
    z = transform(params, xi)
    return exact - pullback(params, xi, expansion.grad_z(z))


def cv_c3(params: VariationalParams, model: ModelSpec, xi) -> np.ndarray:
    block = model.prior_block
    if block is None:
        raise UnavailableControlVariate(f"model {model.name!r} has no fixed Gaussian prior block")
    _, exact = gaussian_prior_term_grad(params, block)
    z = transform(params, xi)
    _, gz = block.log_density_and_grad(z)
    return pullback(params, xi, gz) - exact


def combine(g_base, controls: Sequence[Union[np.ndarray, Callable[[], np.ndarray]]], a) -> np.ndarray:
    """``g_base + sum_i a_i c_i``.

    Entries of ``controls`` may be arrays or zero-argument callables; a
    callable is only invoked when its weight is nonzero.
    """
    a = np.asarray(a, dtype=float).ravel()
    if len(controls) != a.size:
        raise DomainError(f"{len(controls)} control variates but {a.size} weights")
    out = np.array(g_base, dtype=float, copy=True)
    for weight, c in zip(a, controls):
        if weight == 0.0:
            continue
        value = np.asarray(c() if callable(c) else c, dtype=float)
        if value.shape != out.shape:
            raise DomainError(f"control variate shape {value.shape} != base shape {out.shape}")
        out += weight * value
    return out


def minibatch_estimate(estimator: Callable, params: VariationalParams, batch_size: int,
                       seed) -> np.ndarray:
    """Average of ``estimator(params, xi)`` over ``batch_size`` seeded draws.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if batch_size < 1:
        raise DomainError("batch_size must be at least 1")
    rng = np.random.default_rng(seed)
    xis = rng.standard_normal((batch_size, params.dim))
    total = np.zeros(params.size)
    for xi in xis:
        total += estimator(params, xi)
    return total / batch_size


class EstimatorSuite:
    """The base estimator of one model together with its control variates.

    ``labels`` selects which of ``c1``, ``c2``, ``c3`` are in play (in that
    order); weights passed to :meth:`gradient` follow the same order.
    """

    def __init__(self, model: ModelSpec, labels: Sequence[str] = CONTROL_VARIATES):
        labels = tuple(labels)
        for label in labels:
            if label not in CONTROL_VARIATES:
                raise DomainError(f"unknown control variate {label!r}")
        if len(set(labels)) != len(labels):
            raise DomainError("duplicate control variate labels")
        if "c3" in labels and model.prior_block is None:
            raise UnavailableControlVariate(f"c3 is unavailable for model {model.name!r}")
        self.model = model
        self.labels = labels

    @property
    def J(self) -> int:
        return len(self.labels)

    @staticmethod
    def available(model: ModelSpec):
        return tuple(c for c in CONTROL_VARIATES if c != "c3" or model.prior_block is not None)

    def base(self, params, xi) -> np.ndarray:
        return base_rep(params, self.model, xi)

    def stl(self, params, xi) -> np.ndarray:
        return stl(params, self.model, xi)

    def control(self, label: str, params, xi, expansion: Optional[TaylorExpansion] = None):
        if label == "c1":
            return cv_c1(params, xi)
        if label == "c2":
            return cv_c2(params, self.model, xi, expansion=expansion)
        if label == "c3":
            return cv_c3(params, self.model, xi)
        raise DomainError(f"unknown control variate {label!r}")

    def gradient(self, params, xi, weights=None) -> np.ndarray:
        """Minibatch average of ``g_base + sum_i a_i c_i`` over the rows of ``xi``.

        Control variates with zero weight are not computed; the Taylor
        expansion for ``c2`` is built once per call at the current mean.
        """
        xi = np.atleast_2d(xi)
        weights = np.zeros(self.J) if weights is None else np.asarray(weights, dtype=float)
        g = self.base(params, xi)
        controls = []
        for label in self.labels:
            if label == "c2":
                controls.append(lambda: self.control("c2", params, xi, taylor_expansion(self.model, params.mean)))
            else:
                controls.append(lambda label=label: self.control(label, params, xi))
        return combine(g, controls, weights).mean(axis=0)

    def stat_evaluators(self, params):
        """Batched evaluators for the base and each control variate at ``params``.

        The ``c2`` expansion is computed once here and shared by every call.
        """
        expansion = taylor_expansion(self.model, params.mean) if "c2" in self.labels else None
        base = _batched(lambda p, xi: self.base(p, xi))
        cvs = [_batched(lambda p, xi, label=label: self.control(label, p, xi, expansion))
               for label in self.labels]
        return base, cvs

    def pool(self):
        """The (Rep, Miller, STL) pool, each member a batched evaluator."""
        cache = {}

        def miller(p, xi):
            # one expansion per parameter vector, reused across sample chunks
            key = p.flat.tobytes()
            if cache.get("key") != key:
                cache["expansion"] = taylor_expansion(self.model, p.mean)
                cache["key"] = key
            return self.base(p, xi) + cv_c2(p, self.model, xi, expansion=cache["expansion"])

        return {
            "Rep": _batched(lambda p, xi: self.base(p, xi)),
            "Miller": _batched(miller),
            "STL": _batched(lambda p, xi: self.stl(p, xi)),
        }


def _batched(fn):
    fn.batched = True
    return fn
