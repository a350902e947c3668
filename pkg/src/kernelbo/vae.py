"""Variational autoencoder over kernel representations.

Plain numpy MLPs with hand-written reverse mode.  The encoder maps a
representation ``r`` (length 20 by default) through three ReLU layers to the
mean and log-variance of a 2-D Gaussian; the decoder mirrors it back to an
unconstrained reconstruction of ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grammar import MAX_DEGREE, MAX_EXPONENT, KernelCode
from .kernels import N_BASE

LATENT_DIM = 2
ENC_LAYERS = ("enc1", "enc2", "enc3")
DEC_LAYERS = ("dec1", "dec2", "dec3")
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    width: int = 32
    beta: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1 or self.width < 1:
            raise ValueError("batch_size and width must be >= 1")


class VaeParams(dict):
    """Mapping ``layer -> (W, b)`` plus the input dimension.

    ``W`` has shape (fan_in, fan_out).
    """

    @property
    def input_dim(self) -> int:
        return self["enc1"][0].shape[0]

    @property
    def width(self) -> int:
        return self["enc1"][0].shape[1]

    def copy(self) -> "VaeParams":
        return VaeParams({k: (W.copy(), b.copy()) for k, (W, b) in self.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.values()])

    def save(self, path) -> None:
        """Text format: per layer a ``name rows cols`` header then row-major
        values, weights followed by a ``name.b`` bias line."""
        with open(path, "w", encoding="utf-8") as fh:
            for name, (W, b) in self.items():
                fh.write(f"{name} {W.shape[0]} {W.shape[1]}\n")
                for row in W:
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")
                fh.write(" ".join(repr(float(v)) for v in b) + "\n")

    @classmethod
    def load(cls, path) -> "VaeParams":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        i = 0
        while i < len(lines):
            name, rows, cols = lines[i].split()
            rows, cols = int(rows), int(cols)
            W = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)])
            b = np.array([float(v) for v in lines[i + 1 + rows].split()])
            if W.shape != (rows, cols) or b.shape != (cols,):
                raise ValueError(f"bad tensor shape for layer {name}")
            out[name] = (W, b)
            i += rows + 2
        return out


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_params(input_dim: int = 20, width: int = 32, seed: int | np.random.Generator = 0,
                latent_dim: int = LATENT_DIM) -> VaeParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = [
        ("enc1", input_dim, width), ("enc2", width, width), ("enc3", width, width),
        ("mu", width, latent_dim), ("logvar", width, latent_dim),
        ("dec1", latent_dim, width), ("dec2", width, width), ("dec3", width, width),
        ("out", width, input_dim),
    ]
    return VaeParams({name: _glorot(rng, i, o) for name, i, o in shapes})


def _mlp(params, layers, x):
    acts = [x]
    for name in layers:
        W, b = params[name]
        x = np.maximum(x @ W + b, 0.0)
        acts.append(x)
    return x, acts


def encode(params: VaeParams, r) -> tuple[np.ndarray, np.ndarray]:
    """Latent mean and log-variance; accepts one vector or a batch of rows."""
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    R = np.atleast_2d(r)
    if R.shape[1] != params.input_dim:
        raise ValueError(f"expected length {params.input_dim}, got {R.shape[1]}")
    h, _ = _mlp(params, ENC_LAYERS, R)
    mu = h @ params["mu"][0] + params["mu"][1]
    logvar = h @ params["logvar"][0] + params["logvar"][1]
    return (mu[0], logvar[0]) if single else (mu, logvar)


def decode(params: VaeParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    if Z.shape[1] != params["dec1"][0].shape[0]:
        raise ValueError(f"expected latent length {params['dec1'][0].shape[0]}")
    h, _ = _mlp(params, DEC_LAYERS, Z)
    out = h @ params["out"][0] + params["out"][1]
    return out[0] if single else out


def kl_divergence(mu, logvar) -> np.ndarray:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)) per row."""
    mu, logvar = np.atleast_2d(mu), np.atleast_2d(logvar)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)


def _forward(params, R, eps, beta):
    h, enc_acts = _mlp(params, ENC_LAYERS, R)
    mu = h @ params["mu"][0] + params["mu"][1]
    logvar = h @ params["logvar"][0] + params["logvar"][1]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    g, dec_acts = _mlp(params, DEC_LAYERS, z)
    rhat = g @ params["out"][0] + params["out"][1]
    resid = R - rhat
    recon = -0.5 * np.sum(resid * resid, axis=1) - 0.5 * R.shape[1] * LOG_2PI
    kl = kl_divergence(mu, logvar)
    value = float(np.mean(recon - beta * kl))
    cache = (h, enc_acts, mu, logvar, std, z, g, dec_acts, resid)
    return value, cache


def elbo(params: VaeParams, batch, rng: np.random.Generator | None = None,
         beta: float = 0.1, eps=None) -> float:
    """Batch-mean ELBO with unit-variance Gaussian reconstruction."""
    R = np.atleast_2d(np.asarray(batch, dtype=float))
    if R.shape[0] == 0:
        raise ValueError("empty batch")
    if eps is None:
        rng = rng or np.random.default_rng()
        eps = rng.standard_normal((R.shape[0], params["mu"][0].shape[1]))
    return _forward(params, R, eps, beta)[0]


def _backprop_mlp(params, layers, acts, grad_out, grads):
    for i in range(len(layers) - 1, -1, -1):
        name = layers[i]
        grad_out = grad_out * (acts[i + 1] > 0)
        grads[name] = (acts[i].T @ grad_out, grad_out.sum(axis=0))
        grad_out = grad_out @ params[name][0].T
    return grad_out


def elbo_grad(params: VaeParams, batch, eps, beta: float = 0.1):
    """ELBO and its exact gradient for a frozen reparameterisation draw."""
    R = np.atleast_2d(np.asarray(batch, dtype=float))
    m = R.shape[0]
    value, (h, enc_acts, mu, logvar, std, z, g, dec_acts, resid) = _forward(
        params, R, eps, beta
    )
    grads = {}
    d_rhat = resid / m
    grads["out"] = (g.T @ d_rhat, d_rhat.sum(axis=0))
    d_g = d_rhat @ params["out"][0].T
    d_z = _backprop_mlp(params, DEC_LAYERS, dec_acts, d_g, grads)
    d_mu = d_z - beta * mu / m
    d_logvar = d_z * eps * 0.5 * std - beta * 0.5 * (np.exp(logvar) - 1.0) / m
    grads["mu"] = (h.T @ d_mu, d_mu.sum(axis=0))
    grads["logvar"] = (h.T @ d_logvar, d_logvar.sum(axis=0))
    d_h = d_mu @ params["mu"][0].T + d_logvar @ params["logvar"][0].T
    _backprop_mlp(params, ENC_LAYERS, enc_acts, d_h, grads)
    return value, grads


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {k: (np.zeros_like(W), np.zeros_like(b)) for k, (W, b) in params.items()}
        self.v = {k: (np.zeros_like(W), np.zeros_like(b)) for k, (W, b) in params.items()}

    def ascend(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, gk in grads.items():
            for j in (0, 1):
                g = gk[j]
                m = self.m[k][j]
                v = self.v[k][j]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                params[k][j][...] += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(dataset, cfg: TrainConfig | None = None, history: list | None = None) -> VaeParams:
    """Mini-batch Adam ascent on the ELBO; deterministic given ``cfg.seed``.

    When ``history`` is a list, the epoch-mean ELBO is appended to it.
    """
    cfg = cfg or TrainConfig()
    R = np.atleast_2d(np.asarray(dataset, dtype=float))
    n = R.shape[0]
    if n < 1:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(R.shape[1], cfg.width, rng)
    opt = _Adam(params, cfg.lr)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            eps = rng.standard_normal((idx.size, LATENT_DIM))
            value, grads = elbo_grad(params, R[idx], eps, cfg.beta)
            opt.ascend(params, grads)
            total += value * idx.size
        if history is not None:
            history.append(total / n)
    return params


def reconstruction_error(params: VaeParams, R) -> float:
    """Mean squared error of decode(mean(encode(r))) over the rows of R."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    mu, _ = encode(params, R)
    return float(np.mean((decode(params, mu) - R) ** 2))


def nearest_valid_code(r_hat, n_groups: int = 3, max_degree: int = MAX_DEGREE) -> KernelCode:
    """Project a decoder output onto the closest valid canonical code."""
    r = np.asarray(r_hat, dtype=float)[: n_groups * N_BASE]
    r = np.where(np.isfinite(r), r, 0.0)
    code = np.clip(np.rint(r), 0, MAX_EXPONENT).astype(int)
    for g in range(n_groups):
        grp = code[g * N_BASE:(g + 1) * N_BASE]
        while grp.sum() > max_degree:
            grp[int(np.argmax(grp))] -= 1
    if not code.any():
        code[int(np.argmax(r))] = 1
    return KernelCode(tuple(int(v) for v in code), max_degree=max_degree)
