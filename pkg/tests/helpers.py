import numpy as np

from g2t.variational import DIAG, VariationalParams


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def random_params(rng, d, family=DIAG, spread=0.3):
    if family == DIAG:
        return VariationalParams.diagonal(rng.standard_normal(d), spread * rng.standard_normal(d))
    L = np.tril(spread * rng.standard_normal((d, d)), -1) + np.diag(np.exp(spread * rng.standard_normal(d)))
    return VariationalParams.cholesky(rng.standard_normal(d), L)
