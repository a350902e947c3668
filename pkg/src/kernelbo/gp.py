"""Gaussian process regression with composite kernels.

Covariances are factorised once per model with an escalating diagonal
jitter; predictions, evidences and the expected-improvement acquisition are
all solved through the cached lower-triangular factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr

from .grammar import CompositeKernelSpec, KernelCode, decode
from .kernels import (
    KERNEL_PARAMS,
    Geometry,
    Hyperparams,
    base_diag,
    base_matrix,
    base_matrix_grad,
    bounds,
    from_vector,
    param_names,
    to_vector,
)

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-4
NOISE_FLOOR = 1e-8


class NumericalError(ArithmeticError):
    """Raised when a covariance cannot be factorised even at maximum jitter."""


def as_spec(kernel) -> CompositeKernelSpec:
    if isinstance(kernel, CompositeKernelSpec):
        return kernel
    if isinstance(kernel, KernelCode):
        return decode(kernel)
    if isinstance(kernel, str):
        return CompositeKernelSpec.parse(kernel)
    raise TypeError(f"cannot interpret {kernel!r} as a kernel")


def _spec_matrix(spec: CompositeKernelSpec, geom: Geometry, hyper: Hyperparams,
                 memo: dict | None = None):
    if memo is None:
        cache = {k: base_matrix(k, geom, hyper) for k in spec.ids}
    else:
        cache = {}
        for k in spec.ids:
            key = (k, tuple(getattr(hyper, n) for n in KERNEL_PARAMS[k]))
            if key not in memo:
                if len(memo) > 64:
                    memo.clear()
                memo[key] = base_matrix(k, geom, hyper)
            cache[k] = memo[key]
    out = None
    for term in spec.terms:
        prod = None
        for kid, exp in term:
            for _ in range(exp):
                prod = cache[kid] if prod is None else prod * cache[kid]
        out = prod if out is None else out + prod
    return out


def composite_eval(spec, x, x_prime, hyper: Hyperparams) -> float:
    spec = as_spec(spec)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != xp.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {xp.shape}")
    return float(_spec_matrix(spec, Geometry(x[None], xp[None]), hyper)[0, 0])


def covariance(spec, X, hyper: Hyperparams, X2=None) -> np.ndarray:
    """Composite covariance; symmetrised when X2 is omitted."""
    spec = as_spec(spec)
    K = _spec_matrix(spec, Geometry(X, X2), hyper)
    if X2 is None:
        K = 0.5 * (K + K.T)
    return K


def covariance_diag(spec, X, hyper: Hyperparams) -> np.ndarray:
    spec = as_spec(spec)
    cache = {k: base_diag(k, X, hyper) for k in spec.ids}
    out = 0.0
    for term in spec.terms:
        prod = 1.0
        for kid, exp in term:
            prod = prod * cache[kid] ** exp
        out = out + prod
    return np.asarray(out, dtype=float)


def jittered_cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower factor of ``A + jitter*I``.

    A plain factorization is tried first; on failure the jitter starts at
    1e-10 of the mean diagonal and grows by factors of 10 up to 1e-4.
    """
    n = A.shape[0]
    try:
        L = cholesky(A, lower=True, check_finite=False)
        if np.all(np.isfinite(L)):
            return L, 0.0
    except (LinAlgError, ValueError):
        pass
    scale = max(float(np.trace(A)) / n, 1e-300)
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        try:
            L = cholesky(A + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jitter
        except (LinAlgError, ValueError):
            pass
        jitter *= 10.0
    raise NumericalError("covariance not positive definite at maximum jitter")


def _log_evidence_from(L, alpha, y) -> float:
    n = y.shape[0]
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI)


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 50
    lengthscale_starts: tuple = (1.0, 0.1, 10.0)
    fit_noise: bool = True


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    covariance: np.ndarray | None = None
    variance: np.ndarray | None = None


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray
    y: np.ndarray
    spec: CompositeKernelSpec
    hyper: Hyperparams
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @classmethod
    def build(cls, X, y, kernel, hyper: Hyperparams) -> "GpModel":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on the number of observations")
        if X.shape[0] < 1:
            raise ValueError("a GP needs at least one observation")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        spec = as_spec(kernel)
        K = covariance(spec, X, hyper)
        K[np.diag_indices_from(K)] += hyper.noise
        L, jitter = jittered_cholesky(K)
        alpha = cho_solve((L, True), y, check_finite=False)
        return cls(X, y, spec, hyper, L, alpha, jitter)

    @property
    def n(self) -> int:
        return self.y.shape[0]


def _lml(spec, geom, y, hyper, memo=None) -> float:
    K = _spec_matrix(spec, geom, hyper, memo)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += hyper.noise
    L, _ = jittered_cholesky(K)
    alpha = cho_solve((L, True), y, check_finite=False)
    return _log_evidence_from(L, alpha, y)


def _spec_matrix_grad(spec, geom, hyper, names):
    """Composite matrix and its derivative for every name in ``names``."""
    mats, grads = {}, {}
    for k in spec.ids:
        mats[k], grads[k] = base_matrix_grad(k, geom, hyper)
    K = None
    dK = {n: None for n in names}
    for term in spec.terms:
        factors = [(kid, exp) for kid, exp in term]
        prod = None
        for kid, exp in factors:
            for _ in range(exp):
                prod = mats[kid] if prod is None else prod * mats[kid]
        K = prod if K is None else K + prod
        for kid, exp in factors:
            # d(M^e * rest) = e * M^(e-1) * rest * dM
            rest = None
            for other, oexp in factors:
                reps = oexp - 1 if other == kid else oexp
                for _ in range(reps):
                    rest = mats[other] if rest is None else rest * mats[other]
            for pname, dM in grads[kid].items():
                if pname not in dK:
                    continue
                contrib = exp * dM if rest is None else exp * rest * dM
                dK[pname] = contrib if dK[pname] is None else dK[pname] + contrib
    return K, dK


def lml_and_grad(spec, geom: Geometry, y, hyper: Hyperparams, names):
    """Log marginal likelihood and its gradient in optimisation coordinates."""
    K, dK = _spec_matrix_grad(spec, geom, hyper, names)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += hyper.noise
    L, _ = jittered_cholesky(K)
    alpha = cho_solve((L, True), y, check_finite=False)
    value = _log_evidence_from(L, alpha, y)
    Kinv = cho_solve((L, True), np.eye(len(y)), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(len(names))
    for i, n in enumerate(names):
        if n == "noise":
            grad[i] = 0.5 * hyper.noise * np.trace(W)
        else:
            grad[i] = 0.5 * np.einsum("ij,ij->", W, dK[n])
    return value, grad


def fit(X, y, kernel, cfg: FitConfig | None = None,
        init: Hyperparams | None = None) -> GpModel:
    """Maximise the log marginal likelihood over log-hyperparameters.

    Multi-start L-BFGS-B on analytic gradients; the starts are the default
    hyperparameters and copies with lengthscales scaled by 0.1 and 10.  The
    first start reaching the best value wins.
    """
    cfg = cfg or FitConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ValueError("need matching, non-empty X and y")
    spec = as_spec(kernel)
    init = init or Hyperparams()
    if cfg.fit_noise:
        init = init.with_(noise=max(init.noise, NOISE_FLOOR))
    names = param_names(spec.ids, fit_noise=cfg.fit_noise)
    lo, hi = bounds(names)
    geom = Geometry(X)

    def negative(theta):
        try:
            v, g = lml_and_grad(spec, geom, y, from_vector(theta, names, init), names)
        except NumericalError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    best_theta, best_val = None, -np.inf
    for factor in cfg.lengthscale_starts:
        theta0 = np.clip(to_vector(init.scaled_lengthscales(factor), names), lo, hi)
        v0 = -negative(theta0)[0]
        theta, val = theta0, v0
        if cfg.max_iters > 0:
            res = minimize(negative, theta0, jac=True, method="L-BFGS-B",
                           bounds=list(zip(lo, hi)),
                           options={"maxiter": cfg.max_iters})
            if -res.fun >= v0:
                theta, val = res.x, -res.fun
        if val > best_val:
            best_theta, best_val = theta, val
    if best_theta is None:
        raise NumericalError("no start produced a finite evidence")
    return GpModel.build(X, y, spec, from_vector(best_theta, names, init))


def posterior(model: GpModel, Xq, full_cov: bool = True) -> Posterior:
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.X.shape[1]:
        raise ValueError(
            f"query dimension {Xq.shape[1]} != model dimension {model.X.shape[1]}"
        )
    Ks = covariance(model.spec, model.X, model.hyper, Xq)
    mean = Ks.T @ model.alpha
    V = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
    if full_cov:
        cov = covariance(model.spec, Xq, model.hyper) - V.T @ V
        var = np.maximum(np.diag(cov).copy(), 0.0)
        return Posterior(mean, cov, var)
    var = covariance_diag(model.spec, Xq, model.hyper) - np.einsum("ij,ij->j", V, V)
    return Posterior(mean, None, np.maximum(var, 0.0))


def log_evidence(model: GpModel) -> float:
    """Gaussian log marginal likelihood of ``model.y`` under its kernel."""
    return _log_evidence_from(model.chol, model.alpha, model.y)


def normalized_evidence(model: GpModel) -> float:
    return log_evidence(model) / model.n


def evidence(X, y, kernel, cfg: FitConfig | None = None) -> float:
    """Fit hyperparameters then return the per-observation log evidence."""
    return normalized_evidence(fit(X, y, kernel, cfg))


# -------------------------------------------------------------- acquisition
def expected_improvement(model: GpModel, x, f_best: float, xi: float = 0.01):
    """EI for minimisation; accepts a single point or a batch of rows."""
    Xq = np.atleast_2d(np.asarray(x, dtype=float))
    post = posterior(model, Xq, full_cov=False)
    ei = ei_from_moments(post.mean, np.sqrt(post.variance), f_best, xi)
    return float(ei[0]) if np.ndim(x) <= 1 else ei


def ei_from_moments(mu, sigma, f_best, xi=0.01) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = f_best - mu - xi
    out = np.maximum(imp, 0.0)
    pos = sigma > 0
    with np.errstate(over="ignore", under="ignore"):
        z = imp[pos] / sigma[pos]
        out[pos] = imp[pos] * ndtr(z) + sigma[pos] * np.exp(-0.5 * z * z) / math.sqrt(
            2 * math.pi
        )
    return np.maximum(out, 0.0)


def candidate_set(model: GpModel, box, rng: np.random.Generator,
                  n_candidates: int = 2048, n_local: int = 16) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    cands = lo + (hi - lo) * rng.random((n_candidates, lo.size))
    inc = model.X[int(np.argmin(model.y))]
    local = inc + 0.01 * (hi - lo) * rng.standard_normal((n_local, lo.size))
    return np.vstack([cands, np.clip(local, lo, hi)])


def propose_next(model: GpModel, box, rng: np.random.Generator,
                 n_candidates: int = 2048, xi: float = 0.01,
                 candidates: np.ndarray | None = None) -> np.ndarray:
    """Max-EI point among random candidates and local incumbent jitters."""
    if candidates is None:
        candidates = candidate_set(model, box, rng, n_candidates)
    ei = expected_improvement(model, candidates, float(np.min(model.y)), xi)
    return candidates[int(np.argmax(ei))].copy()
