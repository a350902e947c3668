"""Base covariance functions and their shared hyperparameter set.

The five base kernels are addressed either by name (``SE``, ``PER``, ``RQ``,
``MAT``, ``LIN``) or by the single-letter aliases ``A`` .. ``E`` used in the
kernel grammar.  Matrices are built from a :class:`Geometry` so that pairwise
distances are computed once per input set and reused across kernels and
hyperparameter settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

BASE_IDS = ("SE", "PER", "RQ", "MAT", "LIN")
ALIASES = ("A", "B", "C", "D", "E")
ALIAS_TO_ID = dict(zip(ALIASES, BASE_IDS))
ID_TO_ALIAS = dict(zip(BASE_IDS, ALIASES))
N_BASE = len(BASE_IDS)


def resolve_id(name: str) -> str:
    """Map an alias or (case-insensitive) kernel name to its canonical id."""
    key = name.strip().upper()
    if key in ALIAS_TO_ID:
        return ALIAS_TO_ID[key]
    if key in BASE_IDS:
        return key
    raise KeyError(f"unknown base kernel {name!r}")


# parameter name -> (owning kernel, log-transformed, lower, upper); bounds are
# in the optimisation space (log for positive parameters)
PARAMS = {
    "se_ell": ("SE", True, math.log(1e-3), math.log(1e3)),
    "se_var": ("SE", True, math.log(1e-4), math.log(1e4)),
    "per_ell": ("PER", True, math.log(1e-3), math.log(1e3)),
    "per_var": ("PER", True, math.log(1e-4), math.log(1e4)),
    "per_period": ("PER", True, math.log(1e-2), math.log(1e2)),
    "rq_ell": ("RQ", True, math.log(1e-3), math.log(1e3)),
    "rq_var": ("RQ", True, math.log(1e-4), math.log(1e4)),
    "rq_alpha": ("RQ", True, math.log(1e-3), math.log(1e4)),
    "mat_ell": ("MAT", True, math.log(1e-3), math.log(1e3)),
    "mat_var": ("MAT", True, math.log(1e-4), math.log(1e4)),
    "lin_var": ("LIN", True, math.log(1e-4), math.log(1e4)),
    "lin_bias": ("LIN", True, math.log(1e-8), math.log(1e4)),
    "lin_offset": ("LIN", False, -10.0, 10.0),
    "noise": (None, True, math.log(1e-8), math.log(10.0)),
}
KERNEL_PARAMS = {
    k: tuple(n for n, (owner, *_r) in PARAMS.items() if owner == k) for k in BASE_IDS
}
LENGTHSCALES = ("se_ell", "per_ell", "rq_ell", "mat_ell")


@dataclass(frozen=True)
class Hyperparams:
    """Hyperparameters shared per base-kernel identifier, plus noise variance."""

    se_ell: float = 1.0
    se_var: float = 1.0
    per_ell: float = 1.0
    per_var: float = 1.0
    per_period: float = 1.0
    rq_ell: float = 1.0
    rq_var: float = 1.0
    rq_alpha: float = 1.0
    mat_ell: float = 1.0
    mat_var: float = 1.0
    lin_var: float = 1.0
    lin_bias: float = 1.0
    lin_offset: float = 0.0
    noise: float = 1e-2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v}")
            if f.name == "lin_offset":
                continue
            if f.name in ("lin_bias", "noise"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise ValueError(f"{f.name} must be > 0, got {v}")

    def with_(self, **kw) -> "Hyperparams":
        return replace(self, **kw)

    def scaled_lengthscales(self, factor: float) -> "Hyperparams":
        return replace(self, **{k: getattr(self, k) * factor for k in LENGTHSCALES})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_names(ids, fit_noise: bool = True) -> list[str]:
    """Names of the free parameters for a composition using ``ids``."""
    used = set(ids)
    names = [n for n, (owner, *_rest) in PARAMS.items() if owner in used]
    if fit_noise:
        names.append("noise")
    return names


def to_vector(hyper: Hyperparams, names) -> np.ndarray:
    out = np.empty(len(names))
    for i, n in enumerate(names):
        v = getattr(hyper, n)
        out[i] = math.log(max(v, 1e-300)) if PARAMS[n][1] else v
    return out


def from_vector(theta, names, base: Hyperparams) -> Hyperparams:
    kw = {}
    for n, t in zip(names, theta):
        kw[n] = math.exp(t) if PARAMS[n][1] else float(t)
    return replace(base, **kw)


def bounds(names) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([PARAMS[n][2] for n in names])
    hi = np.array([PARAMS[n][3] for n in names])
    return lo, hi


class Geometry:
    """Pairwise quantities between two input sets, reused by every kernel."""

    def __init__(self, X1, X2=None):
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        same = X2 is None
        X2 = X1 if same else np.atleast_2d(np.asarray(X2, dtype=float))
        if X1.shape[1] != X2.shape[1]:
            raise ValueError(
                f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}"
            )
        self.X1, self.X2 = X1, X2
        self.d = X1.shape[1]
        self.dot = X1 @ X2.T
        n1 = np.einsum("ij,ij->i", X1, X1)
        n2 = n1 if same else np.einsum("ij,ij->i", X2, X2)
        sq = n1[:, None] + n2[None, :] - 2.0 * self.dot
        np.maximum(sq, 0.0, out=sq)
        if same:
            np.fill_diagonal(sq, 0.0)
        self.sqdist = sq
        self.dist = np.sqrt(sq)
        self.sum1 = X1.sum(axis=1)
        self.sum2 = X2.sum(axis=1)
        self._diffs = None

    @property
    def diffs(self) -> np.ndarray:
        """Signed coordinate differences, shape (n1, n2, d); built lazily."""
        if self._diffs is None:
            self._diffs = self.X1[:, None, :] - self.X2[None, :, :]
        return self._diffs


def base_matrix(kid: str, geom: Geometry, h: Hyperparams) -> np.ndarray:
    """Covariance matrix of one base kernel over a precomputed geometry."""
    if kid == "SE":
        return h.se_var * np.exp(-0.5 * geom.sqdist / h.se_ell**2)
    if kid == "PER":
        # per-coordinate sum keeps the kernel PSD for d > 1; equal to the
        # distance form in 1-D
        if geom.d == 1:
            s = np.sin(np.pi * geom.dist / h.per_period) ** 2
        else:
            s = (np.sin(np.pi * geom.diffs / h.per_period) ** 2).sum(axis=-1)
        return h.per_var * np.exp(-2.0 * s / h.per_ell**2)
    if kid == "RQ":
        return h.rq_var * (1.0 + geom.sqdist / (2.0 * h.rq_alpha * h.rq_ell**2)) ** (
            -h.rq_alpha
        )
    if kid == "MAT":
        u = math.sqrt(5.0) * geom.dist / h.mat_ell
        return h.mat_var * (1.0 + u + u * u / 3.0) * np.exp(-u)
    if kid == "LIN":
        c = h.lin_offset
        lin = (
            geom.dot
            - c * (geom.sum1[:, None] + geom.sum2[None, :])
            + geom.d * c * c
        )
        return h.lin_bias + h.lin_var * lin
    raise KeyError(kid)


def base_matrix_grad(kid: str, geom: Geometry, h: Hyperparams):
    """Base matrix and its derivatives w.r.t. the optimisation coordinates.

    Returns ``(K, {param: dK})``; positive parameters are differentiated in
    log space, ``lin_offset`` directly.
    """
    if kid == "SE":
        K = h.se_var * np.exp(-0.5 * geom.sqdist / h.se_ell**2)
        return K, {"se_ell": K * geom.sqdist / h.se_ell**2, "se_var": K}
    if kid == "PER":
        if geom.d == 1:
            u = np.pi * geom.dist / h.per_period
            s = np.sin(u) ** 2
            su = np.sin(2 * u) * u
        else:
            u = np.pi * geom.diffs / h.per_period
            s = (np.sin(u) ** 2).sum(axis=-1)
            su = (np.sin(2 * u) * u).sum(axis=-1)
        ell2 = h.per_ell**2
        K = h.per_var * np.exp(-2.0 * s / ell2)
        return K, {
            "per_ell": K * 4.0 * s / ell2,
            "per_var": K,
            "per_period": K * 2.0 * su / ell2,
        }
    if kid == "RQ":
        a = h.rq_alpha
        B = 1.0 + geom.sqdist / (2.0 * a * h.rq_ell**2)
        K = h.rq_var * B ** (-a)
        frac = (B - 1.0) / B
        return K, {
            "rq_ell": K * 2.0 * a * frac,
            "rq_var": K,
            "rq_alpha": K * a * (frac - np.log(B)),
        }
    if kid == "MAT":
        u = math.sqrt(5.0) * geom.dist / h.mat_ell
        e = np.exp(-u)
        K = h.mat_var * (1.0 + u + u * u / 3.0) * e
        return K, {"mat_ell": h.mat_var * e * u * u * (1.0 + u) / 3.0, "mat_var": K}
    if kid == "LIN":
        c = h.lin_offset
        ssum = geom.sum1[:, None] + geom.sum2[None, :]
        lin = geom.dot - c * ssum + geom.d * c * c
        K = h.lin_bias + h.lin_var * lin
        return K, {
            "lin_var": h.lin_var * lin,
            "lin_bias": np.full_like(K, h.lin_bias),
            "lin_offset": h.lin_var * (2.0 * geom.d * c - ssum),
        }
    raise KeyError(kid)


def base_diag(kid: str, X, h: Hyperparams) -> np.ndarray:
    """Diagonal k(x, x) of a base kernel, without forming the full matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if kid == "SE":
        return np.full(n, h.se_var)
    if kid == "PER":
        return np.full(n, h.per_var)
    if kid == "RQ":
        return np.full(n, h.rq_var)
    if kid == "MAT":
        return np.full(n, h.mat_var)
    if kid == "LIN":
        z = X - h.lin_offset
        return h.lin_bias + h.lin_var * np.einsum("ij,ij->i", z, z)
    raise KeyError(kid)


def base_kernel_eval(kid: str, x, x_prime, h: Hyperparams) -> float:
    """Evaluate a single base kernel on one pair of points."""
    kid = resolve_id(kid)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != xp.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {xp.shape}")
    return float(base_matrix(kid, Geometry(x[None, :], xp[None, :]), h)[0, 0])
