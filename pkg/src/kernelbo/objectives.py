"""Benchmark objectives, random linear embeddings and external oracles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .grammar import CompositeKernelSpec
from .kernels import Hyperparams


class DomainError(ValueError):
    """Input outside an objective's evaluation box."""


class SeriesParseError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class SessionError(RuntimeError):
    pass


def _check_box(x, lo, hi, name):
    if np.any(x < lo) or np.any(x > hi):
        raise DomainError(f"{name}: input outside [{lo}, {hi}]")


# ------------------------------------------------------------------ functions
def staircase(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    _check_box(x, -100.0, 100.0, "staircase")
    return float(np.sum(np.floor(np.abs(x + 0.5)) ** 2))


BRANIN_CONSTANTS = dict(
    a=1.0, b=5.1 / (4 * math.pi**2), c=5 / math.pi, r=6.0, s=10.0, t=1 / (8 * math.pi)
)


def branin(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != 2:
        raise DomainError("branin is defined on 2 dimensions")
    if not (-5 <= x[0] <= 10 and 0 <= x[1] <= 15):
        raise DomainError("branin: x1 must lie in [-5, 10] and x2 in [0, 15]")
    k = BRANIN_CONSTANTS
    x1, x2 = x
    return float(
        k["a"] * (x2 - k["b"] * x1**2 + k["c"] * x1 - k["r"]) ** 2
        + k["s"] * (1 - k["t"]) * math.cos(x1)
        + k["s"]
    )


def michalewicz(x, m: int = 10) -> float:
    x = np.asarray(x, dtype=float).ravel()
    _check_box(x, 0.0, math.pi, "michalewicz")
    i = np.arange(1, x.size + 1)
    return float(-np.sum(np.sin(x) * np.sin(i * x**2 / math.pi) ** (2 * m)))


def styblinski_tang(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    _check_box(x, -5.0, 5.0, "styblinski_tang")
    return float(0.5 * np.sum(x**4 - 16 * x**2 + 5 * x))


_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H6_A = np.array([
    [10, 3, 17, 3.5, 1.7, 8],
    [0.05, 10, 17, 0.1, 8, 14],
    [3, 3.5, 1.7, 10, 17, 8],
    [17, 8, 0.05, 10, 0.1, 14],
])
_H6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])
HARTMANN6_MINIMIZER = (0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573)


def hartmann6(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != 6:
        raise DomainError("hartmann6 is defined on 6 dimensions")
    _check_box(x, 0.0, 1.0, "hartmann6")
    inner = np.sum(_H6_A * (x - _H6_P) ** 2, axis=1)
    return float(-np.sum(_H6_ALPHA * np.exp(-inner)))


# 1-D Styblinski-Tang minimiser: root of 4x^3 - 32x + 5 near -2.9035
ST_MINIMIZER = -2.903534027771178
ST_MIN_PER_DIM = 0.5 * (ST_MINIMIZER**4 - 16 * ST_MINIMIZER**2 + 5 * ST_MINIMIZER)
MICHALEWICZ_2D_MIN = -1.8013034100985537


# ------------------------------------------------------------------ objective
@dataclass
class Objective:
    """A boxed black-box function with an evaluation counter."""

    name: str
    func: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    f_star: float | None = None
    minimizers: list = field(default_factory=list)
    evaluations: int = 0

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ValueError("box needs lower < upper in every dimension")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    def __call__(self, x) -> float:
        self.evaluations += 1
        return float(self.func(np.asarray(x, dtype=float)))


OBJECTIVES = ("staircase", "branin", "michalewicz", "styblinski_tang", "hartmann6")


def make_objective(name: str, dims: int | None = None) -> Objective:
    key = name.lower().replace("-", "_")
    if key == "staircase":
        n = dims or 50
        return Objective("staircase", staircase, [-100.0] * n, [100.0] * n, 0.0,
                         [np.zeros(n)])
    if key == "branin":
        if dims not in (None, 2):
            raise ValueError("branin is 2-dimensional")
        return Objective("branin", branin, [-5.0, 0.0], [10.0, 15.0], 0.397887,
                         [np.array(v) for v in ((-math.pi, 12.275), (math.pi, 2.275),
                                                (9.42478, 2.475))])
    if key == "michalewicz":
        n = dims or 2
        f_star = {2: MICHALEWICZ_2D_MIN}.get(n)
        return Objective("michalewicz", michalewicz, [0.0] * n, [math.pi] * n, f_star)
    if key == "styblinski_tang":
        n = dims or 2
        return Objective("styblinski_tang", styblinski_tang, [-5.0] * n, [5.0] * n,
                         ST_MIN_PER_DIM * n, [np.full(n, ST_MINIMIZER)])
    if key == "hartmann6":
        if dims not in (None, 6):
            raise ValueError("hartmann6 is 6-dimensional")
        return Objective("hartmann6", hartmann6, [0.0] * 6, [1.0] * 6,
                         -3.32236801141551, [np.array(HARTMANN6_MINIMIZER)])
    raise KeyError(f"unknown objective {name!r}")


# ------------------------------------------------------------------ embedding
@dataclass(frozen=True)
class EmbeddingMap:
    """Random linear map ``B`` (d x N) with pseudo-inverse lift."""

    B: np.ndarray
    B_pinv: np.ndarray
    ambient_lower: np.ndarray
    ambient_upper: np.ndarray

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def N(self) -> int:
        return self.B.shape[1]

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        r = math.sqrt(self.d)
        return np.full(self.d, -r), np.full(self.d, r)

    def lift(self, y) -> np.ndarray:
        h = self.B_pinv @ np.asarray(y, dtype=float)
        return np.clip(h, self.ambient_lower, self.ambient_upper)


def make_embedding(N: int, d: int, rng: np.random.Generator, ambient_box=None,
                   matrix=None) -> EmbeddingMap:
    if not 1 <= d <= N:
        raise ValueError("embedding needs 1 <= d <= N")
    B = rng.standard_normal((d, N)) if matrix is None else np.asarray(matrix, dtype=float)
    if B.shape != (d, N):
        raise ValueError(f"embedding matrix must be {d}x{N}")
    lo, hi = ambient_box if ambient_box is not None else (
        np.full(N, -np.inf), np.full(N, np.inf))
    return EmbeddingMap(B, np.linalg.pinv(B), np.asarray(lo, float), np.asarray(hi, float))


def embedded_eval(emb: EmbeddingMap, f: Callable, y) -> float:
    return f(emb.lift(y))


def embed_objective(obj: Objective, d: int, rng: np.random.Generator) -> tuple[Objective, EmbeddingMap]:
    """Wrap ``obj`` so it is searched in a d-dimensional random embedding.

    Each call of the wrapper is exactly one call of the ambient objective.
    """
    emb = make_embedding(obj.dim, d, rng, obj.box)
    lo, hi = emb.box
    wrapped = Objective(f"{obj.name}@{d}", lambda y: obj(emb.lift(y)), lo, hi, obj.f_star)
    return wrapped, emb


# ----------------------------------------------------------- GP-sampled truth
TRUTH_HYPER = Hyperparams(se_ell=0.1, per_ell=1.0, per_period=0.25, rq_ell=0.1,
                          rq_alpha=1.0, mat_ell=0.1, noise=0.0)
DEFAULT_ANCHORS = {1: 64, 2: 256}


TRUTH_NUGGET = 1e-8


@dataclass(frozen=True)
class GpSampledObjective:
    """Noiseless posterior mean through anchor draws.

    The draw kernel is ``K + nugget * delta(x, x')``; keeping the nugget in the
    cross-covariance makes the evaluator reproduce every anchor value exactly
    even when ``K`` is numerically singular (PER on several periods).
    """

    spec: CompositeKernelSpec
    anchors: np.ndarray
    values: np.ndarray
    alpha: np.ndarray = field(repr=False)
    hyper: Hyperparams = field(repr=False, default=TRUTH_HYPER)

    def __call__(self, x) -> float:
        return float(self.evaluate(np.atleast_2d(np.asarray(x, dtype=float)))[0])

    def evaluate(self, X) -> np.ndarray:
        from .gp import covariance

        X = np.atleast_2d(np.asarray(X, dtype=float))
        cross = covariance(self.spec, X, self.hyper, self.anchors)
        same = np.all(X[:, None, :] == self.anchors[None, :, :], axis=2)
        return (cross + TRUTH_NUGGET * same) @ self.alpha


def sample_gp_objective(spec, domain, n_anchor: int | None, rng: np.random.Generator,
                        hyper: Hyperparams = TRUTH_HYPER) -> GpSampledObjective:
    """Deterministic function drawn from a GP with a known kernel.

    Anchor inputs come from a scrambled Sobol sequence over ``domain``.
    """
    from scipy.linalg import cho_solve

    from .gp import as_spec, covariance

    spec = as_spec(spec)
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in domain)
    dim = lo.size
    n_anchor = n_anchor or DEFAULT_ANCHORS.get(dim, 64 * dim)
    if n_anchor < 2:
        raise ValueError("need at least two anchors")
    sobol = qmc.Sobol(dim, scramble=True, seed=rng)
    unit = sobol.random(n_anchor)
    anchors = lo + (hi - lo) * unit
    K = covariance(spec, anchors, hyper) + TRUTH_NUGGET * np.eye(n_anchor)
    L = np.linalg.cholesky(K)
    values = L @ rng.standard_normal(n_anchor)
    alpha = cho_solve((L, True), values)
    return GpSampledObjective(spec, anchors, values, alpha, hyper)


# ------------------------------------------------------------------- series
def load_series_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Two numeric columns (time, value); a first-line header is skipped."""
    t, v = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise SeriesParseError(f"line {lineno}: expected two columns")
            try:
                a, b = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1 and not t:
                    continue
                raise SeriesParseError(
                    f"line {lineno}: non-numeric cell in {row!r}"
                ) from None
            t.append(a)
            v.append(b)
    if not t:
        raise SeriesParseError("no data rows")
    t, v = np.asarray(t), np.asarray(v)
    order = np.argsort(t, kind="stable")
    return t[order], v[order]


# -------------------------------------------------------- interactive oracle
class OracleSession:
    """Line protocol for human scores.

    Each query is written as ``QUERY <id> <v1,v2,...>`` (optionally followed
    by `` # <note>``); the reply is one line holding a decimal score.
    """

    max_retries = 3

    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer
        self.next_id = 0
        self.pending = None

    def _send(self, line: str):
        self.writer.write(line + "\n")
        self.writer.flush()

    def _receive(self) -> str:
        line = self.reader.readline()
        if line == "":
            raise SessionError("oracle channel closed")
        return line.strip()


def format_query(qid: int, x, note: str | None = None) -> str:
    vals = ",".join(f"{float(v):.9g}" for v in np.ravel(x))
    line = f"QUERY {qid} {vals}"
    return f"{line} # {note}" if note else line


def interactive_score(session: OracleSession, x, context_note: str | None = None) -> float:
    qid = session.next_id
    session.next_id += 1
    session.pending = qid
    session._send(format_query(qid, x, context_note))
    for attempt in range(session.max_retries + 1):
        reply = session._receive()
        try:
            score = float(reply)
            if not math.isfinite(score):
                raise ValueError
        except ValueError:
            if attempt == session.max_retries:
                break
            session._send(f"RETRY {qid} expected a decimal score, got {reply!r}")
            continue
        session.pending = None
        return score
    raise ProtocolError(f"query {qid}: no valid score after {session.max_retries} re-prompts")


def interactive_objective(session: OracleSession, dims: int) -> Objective:
    """Minimisation wrapper: the objective value is the negated score."""
    return Objective("interactive", lambda x: -interactive_score(session, x),
                     [0.0] * dims, [1.0] * dims, None)
