"""Outer optimisation loop, baseline runners, traces and metrics.

One run alternates between the function-space GP (fit the active kernel,
propose the max-EI point, evaluate) and, every ``relearn`` observations, a
kernel-learning round that picks a new active kernel.  All randomness is drawn
from named child streams of the run seed, so runs that differ only in the
kernel-search method share objective instances and initial designs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gp
from .grammar import (
    BASE_IDS,
    CombinerConfig,
    KernelCode,
    base_code,
    base_codes,
    base_matrices,
    code_from_string,
    generate_dataset,
    nearest_one_hot_code,
    one_hot_encode,
    one_hot_fits,
    decode,
    representation,
    representations,
)
from .objectives import (
    Objective,
    OracleSession,
    embed_objective,
    interactive_objective,
    load_series_csv,
    make_objective,
    sample_gp_objective,
)
from .search import (
    SEARCH_FIT,
    EvidenceOracle,
    boms_search,
    cks_search,
    encode_codes,
    kergpr_select,
    latent_box,
    mcmc_search,
)
from .vae import TrainConfig, train

log = logging.getLogger(__name__)

METHODS = ("kobo", "cks", "mcmc", "boms", "onehot-ablation") + tuple(
    f"fixed:{k}" for k in BASE_IDS
)
TRACE_COLUMNS = ("iter", "point", "f", "best_f", "regret", "kernel", "evidence",
                 "latent_evals", "wall_ms")
STREAMS = ("objective", "design", "acquisition", "search", "vae")


@dataclass(frozen=True)
class RunConfig:
    objective: str = "staircase"
    dims: int | None = None
    embed_dim: int | None = None
    budget: int = 100
    r_init: int = 5
    relearn: int = 5
    kergpr_iters: int = 20
    method: str = "kobo"
    combiner_size: int = 300
    vae: TrainConfig = TrainConfig(epochs=60)
    seed: int = 0
    out: str | None = None
    interactive: bool = False
    n_candidates: int = 2048
    truth: str | None = None
    learn_at_end: bool = False

    def __post_init__(self):
        if self.r_init < 1 or self.r_init > self.budget:
            raise ValueError("need 1 <= r_init <= budget")
        if self.relearn < 1:
            raise ValueError("relearn period must be >= 1")
        if self.kergpr_iters < 0:
            raise ValueError("kergpr iterations must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


@dataclass
class TraceRecord:
    iteration: int
    point: np.ndarray
    f: float
    best_f: float
    regret: float | None
    kernel: str
    evidence: float
    latent_evals: int
    wall_ms: float


@dataclass
class RunResult:
    config: RunConfig
    trace: list
    rounds: list = field(default_factory=list)
    f_star: float | None = None
    best_x: np.ndarray | None = None
    best_f: float = math.inf
    surrogate_x: np.ndarray | None = None
    surrogate_f: float | None = None
    evaluations: int = 0

    def best_series(self) -> np.ndarray:
        return np.array([r.best_f for r in self.trace])

    def f_series(self) -> np.ndarray:
        return np.array([r.f for r in self.trace])


def streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


# ------------------------------------------------------------------- problem
@dataclass
class Problem:
    objective: Objective
    lower: np.ndarray
    upper: np.ndarray
    f_star: float | None

    def to_unit(self, X) -> np.ndarray:
        return (np.atleast_2d(X) - self.lower) / (self.upper - self.lower)

    def from_unit(self, U) -> np.ndarray:
        return self.lower + np.asarray(U) * (self.upper - self.lower)


def build_problem(cfg: RunConfig, rng: np.random.Generator, session=None) -> Problem:
    name = cfg.objective.lower()
    if name == "interactive" or cfg.interactive:
        if session is None:
            raise ValueError("interactive objective needs an oracle session")
        obj = interactive_objective(session, cfg.dims or 2)
        return Problem(obj, obj.lower, obj.upper, None)
    if name.startswith("gp:"):
        spec = decode(code_from_string(name[3:].upper()))
        dim = cfg.dims or 1
        g = sample_gp_objective(spec, (np.zeros(dim), np.ones(dim)), None, rng)
        obj = Objective(f"gp:{spec}", g, np.zeros(dim), np.ones(dim), None)
        return Problem(obj, obj.lower, obj.upper, None)
    obj = make_objective(name, cfg.dims)
    embed = cfg.embed_dim
    if embed is None:
        embed = 6 if obj.dim > 10 else 0
    if embed and embed < obj.dim:
        obj, _ = embed_objective(obj, embed, rng)
    return Problem(obj, obj.lower, obj.upper, obj.f_star)


def _standardise(y):
    y = np.asarray(y, dtype=float)
    mu = y.mean()
    sd = y.std()
    return (y - mu) / (sd if sd > 0 else 1.0)


# --------------------------------------------------------------- kernel rounds
class KernelLearner:
    """Runs one kernel-selection round per call for a fixed method."""

    def __init__(self, cfg: RunConfig, rngs: dict):
        self.cfg = cfg
        self.rng = rngs["search"]
        self.vae_rng = rngs["vae"]
        self.oracle: EvidenceOracle | None = None
        self.round = 0

    @property
    def budget(self) -> int:
        # base kernels + previous winner, then the iteration budget
        return self.cfg.kergpr_iters + len(base_codes()) + 1

    def __call__(self, U, y, active: KernelCode) -> tuple[KernelCode, float, list]:
        if self.oracle is None:
            self.oracle = EvidenceOracle(U, y)
        else:
            self.oracle.update(U, y)
        self.round += 1
        method = self.cfg.method
        if method in ("kobo", "onehot-ablation"):
            res = self._latent_round(U, active, one_hot=method == "onehot-ablation")
        elif method == "mcmc":
            res = mcmc_search(self.oracle, active, 10 * self.budget, self.rng,
                              budget=self.budget)
        elif method == "cks":
            res = cks_search(self.oracle, max_depth=10, budget=self.budget)
        elif method == "boms":
            res = boms_search(self.oracle, U, self.budget, self.rng, budget=self.budget)
        else:
            raise ValueError(f"method {method!r} does not learn kernels")
        return res.code, res.evidence, res.records

    def _latent_round(self, U, active, one_hot=False):
        # seed set: the base kernels plus the currently active kernel
        seen = list(dict.fromkeys(base_codes() + [active]))
        ccfg = CombinerConfig(dataset_size=self.cfg.combiner_size)
        codes = generate_dataset(self.rng, ccfg, include=seen)
        kw = {}
        represent = representations
        if one_hot:
            codes = [c for c in codes if one_hot_fits(c)]
            seen = [c for c in seen if one_hot_fits(c)]
            represent = one_hot_representations
            kw["project"] = nearest_one_hot_code
        R = represent(codes, U)
        tcfg = replace(self.cfg.vae, seed=int(self.vae_rng.integers(2**31)))
        vae = train(R, tcfg)
        box = latent_box(encode_codes(vae, codes, U, represent))
        return kergpr_select(vae, self.oracle, seen, self.cfg.kergpr_iters, self.rng,
                             box=box, X_repr=U, n_candidates=self.cfg.n_candidates,
                             represent=represent, **kw)


def one_hot_representations(codes, X) -> np.ndarray:
    """One-hot structure bits followed by the normalised data distances."""
    mats = base_matrices(X)
    rows = [np.concatenate([one_hot_encode(decode(c)).astype(float),
                            representation(c, X, mats=mats)[-len(BASE_IDS):]])
            for c in codes]
    return np.stack(rows)


# ---------------------------------------------------------------------- runs
def run(cfg: RunConfig, session: OracleSession | None = None, on_record=None) -> RunResult:
    """Execute one optimisation run; ``cfg.method`` selects the kernel policy."""
    rngs = streams(cfg.seed)
    problem = build_problem(cfg, rngs["objective"], session)
    obj = problem.objective
    fixed = cfg.method.startswith("fixed:")
    active = base_code(cfg.method.split(":", 1)[1]) if fixed else base_code("SE")
    learner = None if fixed else KernelLearner(cfg, rngs)
    result = RunResult(cfg, [], f_star=problem.f_star)

    X, y = [], []
    best_f = math.inf
    t0 = time.perf_counter()
    hyper = None
    last_learn = 0

    def record(x, fx, evidence):
        nonlocal best_f
        best_f = min(best_f, fx)
        regret = None if problem.f_star is None else best_f - problem.f_star
        rec = TraceRecord(len(X), np.asarray(x, dtype=float), fx, best_f, regret,
                          f"{active.expression} {active}", evidence,
                          learner.oracle.evaluations if learner and learner.oracle else 0,
                          (time.perf_counter() - t0) * 1000.0)
        result.trace.append(rec)
        if on_record is not None:
            on_record(rec)

    design = problem.from_unit(rngs["design"].random((cfg.r_init, obj.dim)))
    for x in design:
        fx = obj(x)
        X.append(x)
        y.append(fx)
        record(x, fx, _evidence_or_nan(problem.to_unit(np.array(X)), y, active))

    def maybe_learn():
        nonlocal active, hyper, last_learn
        n = len(X)
        if learner is None or n % cfg.relearn or n == last_learn:
            return
        U = problem.to_unit(np.array(X))
        code, ev, records = learner(U, _standardise(y), active)
        last_learn = n
        if code is not None and math.isfinite(ev):
            if code != active:
                hyper = None
            active = code
        result.rounds.append({"n": n, "kernel": active.expression, "code": str(active),
                              "evidence": ev, "latent_evals": learner.oracle.evaluations,
                              "records": records})

    model = None
    while len(X) < cfg.budget:
        maybe_learn()
        U = problem.to_unit(np.array(X))
        ys = _standardise(y)
        model = _fit_active(U, ys, active, hyper)
        hyper = model.hyper
        evidence = gp.normalized_evidence(model)
        u = gp.propose_next(model, (np.zeros(obj.dim), np.ones(obj.dim)),
                            rngs["acquisition"], cfg.n_candidates)
        x = problem.from_unit(u)
        fx = obj(x)
        X.append(x)
        y.append(fx)
        record(x, fx, evidence)
    if cfg.learn_at_end:
        maybe_learn()

    i = int(np.argmin(y))
    result.best_x, result.best_f = np.asarray(X[i]), float(y[i])
    result.evaluations = len(X)
    result.surrogate_x, result.surrogate_f = _surrogate_min(problem, X, y, active, hyper,
                                                            rngs["acquisition"])
    return result


def _fit_active(U, ys, code, hyper):
    init = hyper if hyper is not None else None
    return gp.fit(U, ys, code, SEARCH_FIT, init=init)


def _evidence_or_nan(U, y, code) -> float:
    try:
        return gp.normalized_evidence(_fit_active(U, _standardise(y), code, None))
    except (gp.NumericalError, ValueError):
        return math.nan


def _surrogate_min(problem, X, y, code, hyper, rng):
    """Argmin of the posterior mean over the observations and random probes."""
    try:
        U = problem.to_unit(np.array(X))
        ys = np.asarray(y, dtype=float)
        mu, sd = ys.mean(), ys.std() or 1.0
        model = gp.GpModel.build(U, (ys - mu) / sd, code, hyper or gp.Hyperparams())
        cands = np.vstack([U, np.random.default_rng(0).random((512, U.shape[1]))])
        mean = gp.posterior(model, cands, full_cov=False).mean * sd + mu
        j = int(np.argmin(mean))
        return problem.from_unit(cands[j]), float(mean[j])
    except (gp.NumericalError, ValueError):
        return None, None


run_kobo = run


def run_fixed_kernel(cfg: RunConfig, base_id: str) -> RunResult:
    return run(cfg.with_(method=f"fixed:{base_id.upper()}"))


def run_with_search(cfg: RunConfig, method: str) -> RunResult:
    return run(cfg.with_(method=method))


# ------------------------------------------------------------------- metrics
def regret(trace, f_star: float | None):
    """Best-so-far minus the known optimum; None when the optimum is unknown."""
    if f_star is None:
        return None
    best = np.array([r.best_f if isinstance(r, TraceRecord) else r for r in trace])
    return best - f_star


def evaluations_to(trace, f_star: float, eps: float) -> int | None:
    """1-based index of the first row with regret <= eps, or None."""
    for k, rec in enumerate(trace, start=1):
        if rec.best_f - f_star <= eps:
            return k
    return None


def f_range(trace) -> float:
    f = np.array([r.f for r in trace])
    return float(f.max() - f.min())


# ------------------------------------------------------------------- traces
def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.9g}"


def trace_rows(result: RunResult, wall: bool = True) -> list[list[str]]:
    rows = []
    for r in result.trace:
        rows.append([
            str(r.iteration),
            ";".join(_fmt(float(v)) for v in r.point),
            _fmt(r.f),
            _fmt(r.best_f),
            _fmt(r.regret),
            r.kernel,
            _fmt(r.evidence),
            str(r.latent_evals),
            _fmt(r.wall_ms) if wall else "",
        ])
    return rows


def trace_csv(result: RunResult, wall: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    w.writerows(trace_rows(result, wall))
    return buf.getvalue()


def write_trace(result: RunResult, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(trace_csv(result), encoding="utf-8")


def read_trace(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- comparisons
def compare(cfg: RunConfig, methods, seeds, out_dir=None, progress=None) -> dict:
    """Run every (method, seed) pair; returns ``{method: [RunResult, ...]}``."""
    results = {m: [] for m in methods}
    for seed in seeds:
        for m in methods:
            res = run(cfg.with_(method=m, seed=seed))
            results[m].append(res)
            if out_dir is not None:
                safe = m.replace(":", "-")
                write_trace(res, Path(out_dir) / f"{safe}_seed{seed}.csv")
            if progress is not None:
                progress(m, seed, res)
    return results


def summarize(results: dict, eps_frac: float = 0.01) -> list[dict]:
    """Median final regret and evaluations-to-epsilon per method."""
    rows = []
    for m, runs in results.items():
        finals, hits = [], []
        for res in runs:
            if res.f_star is None:
                continue
            finals.append(res.trace[-1].best_f - res.f_star)
            eps = eps_frac * f_range(res.trace)
            k = evaluations_to(res.trace, res.f_star, eps)
            hits.append(k if k is not None else len(res.trace) + 1)
        rows.append({
            "method": m,
            "runs": len(runs),
            "median_final_regret": float(np.median(finals)) if finals else math.nan,
            "median_evals_to_eps": float(np.median(hits)) if hits else math.nan,
        })
    return rows


# --------------------------------------------------------------------- series
@dataclass
class SeriesFit:
    code: KernelCode
    evidence: float
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    base_evidence: dict


def fit_series(cfg: RunConfig, csv_path=None, prefix_fraction: float = 0.6,
               method: str | None = None, series=None, grid=None) -> SeriesFit:
    """Learn a kernel on the first part of a 1-D series and extrapolate."""
    t, v = series if series is not None else load_series_csv(csv_path)
    t, v = np.asarray(t, dtype=float), np.asarray(v, dtype=float)
    m = int(round(prefix_fraction * t.size))
    if m < 5:
        raise ValueError("series prefix must hold at least 5 points")
    t0, span = t.min(), (t.max() - t.min()) or 1.0
    U = ((t[:m] - t0) / span)[:, None]
    mu, sd = v[:m].mean(), v[:m].std() or 1.0
    ys = (v[:m] - mu) / sd
    method = method or cfg.method
    rngs = streams(cfg.seed)
    learner = KernelLearner(cfg.with_(method=method) if not method.startswith("fixed:")
                            else cfg.with_(method="kobo"), rngs)
    if method.startswith("fixed:"):
        code = base_code(method.split(":", 1)[1])
        learner.oracle = EvidenceOracle(U, ys)
        ev = learner.oracle(code)
    else:
        code, ev, _ = learner(U, ys, base_code("SE"))
    base_ev = {c.expression: learner.oracle(c) for c in base_codes()}
    model = gp.fit(U, ys, code, SEARCH_FIT)
    grid = t if grid is None else np.asarray(grid, dtype=float)
    post = gp.posterior(model, ((grid - t0) / span)[:, None], full_cov=False)
    return SeriesFit(code, ev, grid, post.mean * sd + mu, np.sqrt(post.variance) * sd, base_ev)


# ----------------------------------------------------------- kernel recovery
def recover_kernel(truth: str, q: int = 25, seed: int = 0, checkpoints=None,
                   cfg: RunConfig | None = None) -> list[dict]:
    """Optimise a GP-sampled 1-D objective and report the kernel at each Q.

    A kernel-learning round runs whenever Q reaches a multiple of the relearn
    period, including the final one.
    """
    cfg = (cfg or RunConfig()).with_(objective=f"gp:{truth}", dims=1, embed_dim=0,
                                     budget=q, seed=seed, learn_at_end=True,
                                     r_init=min((cfg or RunConfig()).r_init, q))
    res = run(cfg)
    checkpoints = checkpoints or list(range(cfg.relearn, q + 1, cfg.relearn))
    out = []
    truth_code = code_from_string(truth.upper())
    for rd in res.rounds:
        if rd["n"] in checkpoints:
            out.append({"q": rd["n"], "kernel": rd["kernel"], "code": rd["code"],
                        "evidence": rd["evidence"], "truth": truth_code.expression})
    return out


# ------------------------------------------------------------ VAE reconstruction
def vae_check(size: int = 2000, points: int = 10, dim: int = 2, seed: int = 0,
              train_cfg: TrainConfig | None = None) -> dict:
    """Exact-code recovery of a trained KerVAE on a combiner dataset.

    The representation uses a fixed random D of ``points`` inputs in
    ``[0, 1]^dim``; recovery counts codes whose projected reconstruction
    (decoder applied to the encoder mean) equals the original code.
    """
    from .vae import decode as vae_decode, encode as vae_encode, nearest_valid_code, \
        reconstruction_error

    rngs = streams(seed)
    D = rngs["design"].random((points, dim))
    codes = generate_dataset(rngs["search"], CombinerConfig(dataset_size=size))
    R = representations(codes, D)
    params = train(R, train_cfg or TrainConfig(seed=seed))
    mu, _ = vae_encode(params, R)
    out = vae_decode(params, mu)
    hits = sum(nearest_valid_code(o) == c for o, c in zip(out, codes))
    return {"codes": len(codes), "recovered": int(hits), "recovery": hits / len(codes),
            "mse": reconstruction_error(params, R)}
