"""Kernel selection over the grammar space.

Four strategies share one :class:`EvidenceOracle`: latent-space BO through a
trained VAE (``kergpr_select``), Metropolis-Hastings (``mcmc_search``), greedy
compositional search (``cks_search``) and BO with a Hellinger kernel-kernel
(``boms_search``).  Each returns a :class:`SearchResult` whose ``records``
list is the per-iteration trace.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import gp
from .grammar import (
    BASE_IDS,
    KernelCode,
    add_base,
    base_codes,
    multiply_base,
    representations,
)
from .kernels import Hyperparams
from .vae import VaeParams, decode, encode, nearest_valid_code

log = logging.getLogger(__name__)

# single-start fits keep the many evidence evaluations of a search affordable
SEARCH_FIT = gp.FitConfig(max_iters=50, lengthscale_starts=(1.0, 0.1))
LATENT_FIT = gp.FitConfig(max_iters=30, lengthscale_starts=(1.0,))


class EvidenceOracle:
    """Memoised per-observation log evidence of codes on the current data.

    Memo keys are ``(code, n)``: the observation set only grows during a run,
    so ``n`` identifies it.
    """

    def __init__(self, X, y, fit_cfg: gp.FitConfig = SEARCH_FIT):
        self.fit_cfg = fit_cfg
        self.memo: dict = {}
        self.evaluations = 0
        self.failures = 0
        self.update(X, y)

    def update(self, X, y):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0] or self.y.size == 0:
            raise ValueError("oracle needs matching, non-empty X and y")

    @property
    def n(self) -> int:
        return self.y.size

    def known(self, code: KernelCode) -> bool:
        return (code, self.n) in self.memo

    def __call__(self, code: KernelCode) -> float:
        key = (code, self.n)
        if key not in self.memo:
            self.evaluations += 1
            try:
                value = gp.evidence(self.X, self.y, code, self.fit_cfg)
            except (gp.NumericalError, ValueError, FloatingPointError) as exc:
                log.debug("evidence of %s failed: %s", code, exc)
                self.failures += 1
                value = -math.inf
            self.memo[key] = value
        return self.memo[key]

    def fresh(self, code: KernelCode) -> float:
        """Recompute without touching the memo."""
        return gp.evidence(self.X, self.y, code, self.fit_cfg)


@dataclass
class SearchResult:
    code: KernelCode
    evidence: float
    records: list = field(default_factory=list)
    evaluated: list = field(default_factory=list)


class _Tracker:
    """Incumbent bookkeeping shared by all strategies."""

    def __init__(self, oracle: EvidenceOracle):
        self.oracle = oracle
        self.start_evals = oracle.evaluations
        self.best_code = None
        self.best_value = -math.inf
        self.records = []
        self.evaluated = []

    @property
    def spent(self) -> int:
        return self.oracle.evaluations - self.start_evals

    def evaluate(self, code: KernelCode) -> float:
        value = self.oracle(code)
        if code not in self.evaluated:
            self.evaluated.append(code)
        if value > self.best_value or self.best_code is None:
            self.best_code, self.best_value = code, value
        return value

    def record(self, iteration: int, code: KernelCode, value: float):
        self.records.append({
            "iteration": iteration,
            "kernel": code.expression,
            "code": str(code),
            "evidence": value,
            "best_evidence": self.best_value,
            "latent_evals": self.spent,
        })

    def result(self) -> SearchResult:
        return SearchResult(self.best_code, self.best_value, self.records, self.evaluated)


# ------------------------------------------------------------------- KerGPR
@dataclass
class KerGprState:
    vae: VaeParams
    box: tuple
    Z: list = field(default_factory=list)
    values: list = field(default_factory=list)
    codes: list = field(default_factory=list)


def latent_box(latents: np.ndarray, margin: float = 0.1):
    """Bounding box of latent means expanded by ``margin`` of its width per side."""
    lo, hi = latents.min(axis=0), latents.max(axis=0)
    width = np.maximum(hi - lo, 1e-6)
    return lo - margin * width, hi + margin * width


def encode_codes(vae: VaeParams, codes, X, represent=representations) -> np.ndarray:
    return encode(vae, represent(codes, X))[0]


def kergpr_select(vae: VaeParams, oracle: EvidenceOracle, seen_codes, iters: int = 20,
                  rng: np.random.Generator | None = None, box=None, X_repr=None,
                  n_candidates: int = 2048, represent=representations,
                  project=nearest_valid_code) -> SearchResult:
    """BO over the VAE latent space maximising model evidence.

    ``X_repr`` is the input set used for the data-based representation
    (defaults to the oracle's observations); ``box`` defaults to the bounding
    box of the seen codes' latent means.  ``represent`` and ``project`` swap
    in another code representation (the one-hot ablation uses this).
    """
    rng = rng or np.random.default_rng()
    seen_codes = list(dict.fromkeys(seen_codes))
    if not seen_codes:
        raise ValueError("kergpr_select needs at least one seen code")
    X_repr = oracle.X if X_repr is None else X_repr
    Z0 = encode_codes(vae, seen_codes, X_repr, represent)
    if box is None:
        box = latent_box(Z0)
    state = KerGprState(vae, box)
    track = _Tracker(oracle)
    for code, z in zip(seen_codes, Z0):
        v = track.evaluate(code)
        state.Z.append(z)
        state.values.append(v)
        state.codes.append(code)
    track.record(0, track.best_code, track.best_value)

    for it in range(1, iters + 1):
        z = _propose_latent(state, rng, n_candidates)
        code = project(decode(vae, z))
        v = track.evaluate(code)
        state.Z.append(z)
        state.values.append(v)
        state.codes.append(code)
        track.record(it, code, v)
    return track.result()


def _propose_latent(state: KerGprState, rng, n_candidates) -> np.ndarray:
    Z = np.asarray(state.Z)
    v = np.asarray(state.values)
    ok = np.isfinite(v)
    lo, hi = state.box
    if ok.sum() < 2 or np.ptp(v[ok]) == 0:
        return lo + (hi - lo) * rng.random(lo.size)
    # minimise the negated, standardised evidence
    target = -(v[ok] - v[ok].mean()) / v[ok].std()
    model = gp.fit(Z[ok], target, "SE", LATENT_FIT)
    return gp.propose_next(model, (lo, hi), rng, n_candidates)


# --------------------------------------------------------------------- MCMC
def mh_acceptance(value_new: float, value_cur: float, n: int, log_ratio: float = 0.0) -> float:
    """min(1, exp(n * (L' - L) + log proposal ratio)) for normalised evidences."""
    if not math.isfinite(value_new):
        return 0.0
    if not math.isfinite(value_cur):
        return 1.0
    a = n * (value_new - value_cur) + log_ratio
    return 1.0 if a >= 0 else math.exp(a)


def grammar_proposal(code: KernelCode, rng: np.random.Generator, retries: int = 100):
    """Add or multiply (50/50) a uniformly chosen base kernel; None if stuck."""
    for _ in range(retries):
        kid = BASE_IDS[rng.integers(len(BASE_IDS))]
        new = add_base(code, kid) if rng.random() < 0.5 else multiply_base(code, kid)
        if new is not None:
            return new
    return None


@dataclass
class McmcState:
    code: KernelCode
    value: float
    history: list = field(default_factory=list)
    accepted: int = 0
    steps: int = 0
    acceptance_probs: list = field(default_factory=list)


def mcmc_search(oracle, init_code: KernelCode, steps: int, rng: np.random.Generator,
                budget: int | None = None, propose=grammar_proposal,
                n: int | None = None) -> SearchResult:
    """Metropolis-Hastings over codes; returns the best code visited.

    ``budget`` caps new evidence evaluations; ``propose(code, rng)`` may be
    replaced (it must return None when no move exists).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not hasattr(oracle, "evaluations"):
        oracle = FunctionOracle(oracle, n or 1)
    n = n if n is not None else oracle.n
    track = _Tracker(oracle)
    state = McmcState(init_code, track.evaluate(init_code))
    state.history.append(init_code)
    track.record(0, init_code, state.value)
    for it in range(1, steps + 1):
        if budget is not None and track.spent >= budget:
            break
        proposal = propose(state.code, rng)
        state.steps += 1
        if proposal is None:
            state.acceptance_probs.append(0.0)
            state.history.append(state.code)
            continue
        value = track.evaluate(proposal)
        a = mh_acceptance(value, state.value, n)
        state.acceptance_probs.append(a)
        if rng.random() < a:
            state.code, state.value = proposal, value
            state.accepted += 1
        state.history.append(state.code)
        track.record(it, proposal, value)
    result = track.result()
    result.state = state
    return result


class FunctionOracle:
    """Adapts a plain ``code -> value`` callable to the oracle interface."""

    def __init__(self, fn, n: int = 1):
        self.fn = fn
        self.n = n
        self.evaluations = 0
        self._seen = set()

    def known(self, code) -> bool:
        return code in self._seen

    def __call__(self, code):
        if code not in self._seen:
            self._seen.add(code)
            self.evaluations += 1
        return self.fn(code)


# ---------------------------------------------------------------------- CKS
def cks_expansions(code: KernelCode) -> list[KernelCode]:
    out = []
    for kid in BASE_IDS:
        for new in (add_base(code, kid), multiply_base(code, kid)):
            if new is not None and new != code and new not in out:
                out.append(new)
    if sum(code.entries) == 1:
        for b in base_codes(code.n_groups):
            if b != code and b not in out:
                out.append(b)
    return out


def cks_search(oracle: EvidenceOracle, max_depth: int, budget: int | None = None) -> SearchResult:
    """Greedy tree search: expand the level's best by +B, *B and base swaps."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    track = _Tracker(oracle)
    it = 0

    def run_level(cands):
        nonlocal it
        best, best_v = None, -math.inf
        for c in cands:
            if budget is not None and track.spent >= budget and not oracle.known(c):
                break
            v = track.evaluate(c)
            it += 1
            track.record(it, c, v)
            if v > best_v or best is None:
                best, best_v = c, v
        return best, best_v

    current, current_v = run_level(base_codes())
    for _ in range(1, max_depth):
        if current is None:
            break
        cand, cand_v = run_level(cks_expansions(current))
        if cand is None or cand_v <= current_v:
            break
        current, current_v = cand, cand_v
    return track.result()


# --------------------------------------------------------------------- BOMS
def hellinger_sq(muP, KP, muQ, KQ) -> float:
    """Squared Hellinger distance between two multivariate Gaussians."""
    muP, muQ = np.atleast_1d(muP).astype(float), np.atleast_1d(muQ).astype(float)
    KP, KQ = np.atleast_2d(KP).astype(float), np.atleast_2d(KQ).astype(float)
    if KP.shape != KQ.shape or muP.shape != muQ.shape or KP.shape[0] != muP.size:
        raise ValueError("mismatched Gaussian dimensions")
    M = 0.5 * (KP + KQ)
    LP, _ = gp.jittered_cholesky(KP)
    LQ, _ = gp.jittered_cholesky(KQ)
    LM, _ = gp.jittered_cholesky(M)

    def logdet(L):
        return 2.0 * np.log(np.diag(L)).sum()

    diff = muP - muQ
    w = solve_triangular(LM, diff, lower=True)
    log_coef = 0.25 * logdet(LP) + 0.25 * logdet(LQ) - 0.5 * logdet(LM)
    d2 = 1.0 - math.exp(log_coef - 0.125 * float(w @ w))
    return min(max(d2, 0.0), 1.0)


def _prior_cov(code, X, hyper: Hyperparams):
    K = gp.covariance(code, X, hyper)
    K[np.diag_indices_from(K)] += hyper.noise
    return K


def kernel_kernel(codeA, codeB, X, sigma: float = 1.0, l: float = 0.2,
                  hyper: Hyperparams | None = None) -> float:
    """sigma^2 exp(-d_H^2 / (2 l^2)) between the zero-mean GP priors on X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        raise ValueError("kernel_kernel needs observations")
    hyper = hyper or Hyperparams()
    if codeA == codeB:
        return sigma**2
    zero = np.zeros(X.shape[0])
    d2 = hellinger_sq(zero, _prior_cov(codeA, X, hyper), zero, _prior_cov(codeB, X, hyper))
    return sigma**2 * math.exp(-0.5 * d2 / l**2)


class _HellingerCache:
    def __init__(self, X, hyper):
        self.X, self.hyper = X, hyper
        self.chol = {}
        self.dist = {}

    def _factor(self, code):
        if code not in self.chol:
            K = _prior_cov(code, self.X, self.hyper)
            L, _ = gp.jittered_cholesky(K)
            self.chol[code] = (K, 2.0 * np.log(np.diag(L)).sum())
        return self.chol[code]

    def d2(self, a, b) -> float:
        if a == b:
            return 0.0
        key = (a, b) if str(a) < str(b) else (b, a)
        if key not in self.dist:
            KA, ldA = self._factor(a)
            KB, ldB = self._factor(b)
            LM, _ = gp.jittered_cholesky(0.5 * (KA + KB))
            ldM = 2.0 * np.log(np.diag(LM)).sum()
            self.dist[key] = min(max(1.0 - math.exp(0.25 * ldA + 0.25 * ldB - 0.5 * ldM), 0.0), 1.0)
        return self.dist[key]


@dataclass
class BomsState:
    candidates: list
    sigma: float = 1.0
    l: float = 0.2
    tau: float = 0.5
    evaluated: dict = field(default_factory=dict)


def boms_search(oracle: EvidenceOracle, X, steps: int, rng: np.random.Generator | None = None,
                tau: float = 0.5, sigma: float = 1.0, l: float = 0.2,
                expand: bool = True, budget: int | None = None,
                hyper: Hyperparams | None = None) -> SearchResult:
    """BO over an active candidate set with a Hellinger kernel-kernel."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cache = _HellingerCache(X, hyper or Hyperparams())
    state = BomsState(list(base_codes()), sigma, l, tau)
    track = _Tracker(oracle)
    for it in range(1, steps + 1):
        if budget is not None and track.spent >= budget:
            break
        pool = [c for c in state.candidates if c not in state.evaluated]
        if not pool:
            break
        pick = _boms_pick(state, pool, cache)
        v = track.evaluate(pick)
        state.evaluated[pick] = v
        track.record(it, pick, v)
        if expand and track.best_code is not None:
            inc = track.best_code
            for kid in BASE_IDS:
                for new in (add_base(inc, kid), multiply_base(inc, kid)):
                    if new is None or new in state.candidates:
                        continue
                    if cache.d2(inc, new) <= state.tau:
                        state.candidates.append(new)
    result = track.result()
    result.state = state
    return result


def _boms_pick(state: BomsState, pool, cache: _HellingerCache) -> KernelCode:
    done = [(c, v) for c, v in state.evaluated.items() if math.isfinite(v)]
    if not done:
        return pool[0]
    codes = [c for c, _ in done]
    v = np.array([x for _, x in done])
    scale = v.std() if v.size > 1 and v.std() > 0 else 1.0
    target = (v - v.mean()) / scale

    def kg(a, b):
        return state.sigma**2 * math.exp(-0.5 * cache.d2(a, b) / state.l**2)

    K = np.array([[kg(a, b) for b in codes] for a in codes])
    L, _ = gp.jittered_cholesky(K + 1e-6 * np.eye(len(codes)))
    alpha = cho_solve((L, True), target)
    Ks = np.array([[kg(a, b) for b in pool] for a in codes])
    mean = Ks.T @ alpha
    V = solve_triangular(L, Ks, lower=True)
    var = np.maximum(state.sigma**2 - np.einsum("ij,ij->j", V, V), 0.0)
    # maximisation of evidence == minimisation of its negation
    ei = gp.ei_from_moments(-mean, np.sqrt(var), float(-target.max()), xi=0.01)
    return pool[int(np.argmax(ei))]
