"""Independent scalar reference implementations used as test oracles.

Everything here is written pointwise with plain loops and ``math`` so it
shares no code with the package.
"""

import math

import numpy as np


def k_naive(kid, x, xp, h):
    x, xp = np.atleast_1d(x).astype(float), np.atleast_1d(xp).astype(float)
    r2 = sum((a - b) ** 2 for a, b in zip(x, xp))
    r = math.sqrt(r2)
    if kid == "SE":
        return h.se_var * math.exp(-r2 / (2 * h.se_ell ** 2))
    if kid == "PER":
        s = sum(math.sin(math.pi * abs(a - b) / h.per_period) ** 2 for a, b in zip(x, xp))
        return h.per_var * math.exp(-2 * s / h.per_ell ** 2)
    if kid == "RQ":
        return h.rq_var * (1 + r2 / (2 * h.rq_alpha * h.rq_ell ** 2)) ** (-h.rq_alpha)
    if kid == "MAT":
        q = math.sqrt(5) * r / h.mat_ell
        return h.mat_var * (1 + q + 5 * r2 / (3 * h.mat_ell ** 2)) * math.exp(-q)
    if kid == "LIN":
        c = h.lin_offset
        return h.lin_bias + h.lin_var * sum((a - c) * (b - c) for a, b in zip(x, xp))
    raise KeyError(kid)


def composite_naive(terms, x, xp, h):
    total = 0.0
    for term in terms:
        prod = 1.0
        for kid, e in term:
            for _ in range(e):
                prod *= k_naive(kid, x, xp, h)
        total += prod
    return total


def gram_naive(terms, X, h, X2=None):
    X2 = X if X2 is None else X2
    return np.array([[composite_naive(terms, a, b, h) for b in X2] for a in X])


def gp_naive(terms, X, y, Xq, h):
    """Posterior mean/cov and log evidence via explicit inverse and determinant."""
    K = gram_naive(terms, X, h) + h.noise * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    Ks = gram_naive(terms, X, h, Xq)
    Kss = gram_naive(terms, Xq, h)
    mean = Ks.T @ Kinv @ y
    cov = Kss - Ks.T @ Kinv @ Ks
    sign, logdet = np.linalg.slogdet(K)
    lml = -0.5 * y @ Kinv @ y - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi)
    return mean, cov, lml
