"""Grammar codes for composite kernels.

A composite kernel is a sum of at most ``G`` product terms over the five base
kernels.  Its code is the flat vector of per-term exponents,
``[a1, b1, c1, d1, e1, a2, ..., e_G]``, so ``A^2*E + C*D`` becomes
``[2,0,0,0,1, 0,0,1,1,0, 0,0,0,0,0]``.  Codes are kept in canonical form
(groups sorted non-increasing, empty groups last) which makes the map from
codes to kernels injective.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    ALIASES,
    BASE_IDS,
    N_BASE,
    Geometry,
    Hyperparams,
    base_matrix,
    resolve_id,
)

N_GROUPS = 3
MAX_DEGREE = 3
MAX_EXPONENT = 3
RETRY_CAP = 100
OPERATORS = ("add", "multiply", "end")


class GrammarError(ValueError):
    """Base class for kernel grammar errors."""


class InvalidCodeError(GrammarError):
    pass


class CapacityError(GrammarError):
    pass


class GenerationError(RuntimeError):
    pass


def _canonical_groups(entries, n_groups):
    groups = [tuple(entries[i * N_BASE:(i + 1) * N_BASE]) for i in range(n_groups)]
    groups.sort(reverse=True)
    return tuple(v for g in groups for v in g)


@dataclass(frozen=True)
class KernelCode:
    """Canonical integer exponent vector of a composite kernel.

    Any group order is accepted on construction; the stored entries are
    always canonical.
    """

    entries: tuple
    max_degree: int = field(default=MAX_DEGREE, compare=False, repr=False)

    def __post_init__(self):
        raw = tuple(int(v) for v in self.entries)
        if any(float(a) != float(b) for a, b in zip(raw, self.entries)):
            raise InvalidCodeError(f"code entries must be integers: {self.entries}")
        if len(raw) == 0 or len(raw) % N_BASE:
            raise InvalidCodeError(
                f"code length must be a positive multiple of {N_BASE}, got {len(raw)}"
            )
        if any(v < 0 or v > MAX_EXPONENT for v in raw):
            raise InvalidCodeError(f"entries must lie in 0..{MAX_EXPONENT}: {raw}")
        n_groups = len(raw) // N_BASE
        for g in range(n_groups):
            if sum(raw[g * N_BASE:(g + 1) * N_BASE]) > self.max_degree:
                raise InvalidCodeError(
                    f"group {g} exceeds degree {self.max_degree}: {raw}"
                )
        if not any(raw):
            raise InvalidCodeError("the all-zero code is not a kernel")
        object.__setattr__(self, "entries", _canonical_groups(raw, n_groups))

    @property
    def n_groups(self) -> int:
        return len(self.entries) // N_BASE

    def groups(self) -> list[tuple]:
        e = self.entries
        return [e[i * N_BASE:(i + 1) * N_BASE] for i in range(self.n_groups)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=float)

    def __str__(self) -> str:
        return "[" + ",".join(str(v) for v in self.entries) + "]"

    @property
    def expression(self) -> str:
        return str(decode(self))


@dataclass(frozen=True)
class CompositeKernelSpec:
    """Sum of product terms; each term is a tuple of (base id, exponent)."""

    terms: tuple

    def __post_init__(self):
        if not self.terms:
            raise GrammarError("a composite kernel needs at least one term")
        norm = []
        for term in self.terms:
            items = term.items() if isinstance(term, dict) else term
            merged: Counter = Counter()
            for kid, exp in items:
                exp = int(exp)
                if exp < 1:
                    raise GrammarError(f"exponents must be positive, got {exp}")
                merged[resolve_id(kid)] += exp
            if not merged:
                raise GrammarError("empty product term")
            norm.append(tuple((k, merged[k]) for k in BASE_IDS if k in merged))
        object.__setattr__(self, "terms", tuple(norm))

    @property
    def ids(self) -> set:
        return {k for term in self.terms for k, _ in term}

    def term_multiset(self) -> Counter:
        return Counter(self.terms)

    def same_terms(self, other: "CompositeKernelSpec") -> bool:
        return self.term_multiset() == other.term_multiset()

    def __str__(self) -> str:
        parts = []
        for term in self.terms:
            parts.append(
                "*".join(k if e == 1 else f"{k}^{e}" for k, e in term)
            )
        return " + ".join(parts)

    @classmethod
    def parse(cls, text: str) -> "CompositeKernelSpec":
        """Parse expressions such as ``"SE^2*PER + RQ*MAT"`` or ``"A*A*B+C"``."""
        if not text or not text.strip():
            raise GrammarError("empty kernel expression")
        terms = []
        for raw_term in text.split("+"):
            factors = []
            for raw_factor in raw_term.split("*"):
                m = re.fullmatch(r"\s*([A-Za-z]+)\s*(?:\^\s*(\d+))?\s*", raw_factor)
                if not m:
                    raise GrammarError(f"cannot parse factor {raw_factor!r} in {text!r}")
                try:
                    kid = resolve_id(m.group(1))
                except KeyError as exc:
                    raise GrammarError(str(exc)) from None
                factors.append((kid, int(m.group(2) or 1)))
            terms.append(tuple(factors))
        return cls(tuple(terms))


def canonicalize(code) -> KernelCode:
    """Return the canonical form of a code (a KernelCode or a raw sequence)."""
    entries = code.entries if isinstance(code, KernelCode) else tuple(code)
    return KernelCode(entries)


def encode(spec: CompositeKernelSpec, n_groups: int = N_GROUPS,
           max_degree: int = MAX_DEGREE) -> KernelCode:
    if len(spec.terms) > n_groups:
        raise CapacityError(
            f"{len(spec.terms)} terms exceed the {n_groups}-group capacity"
        )
    entries = [0] * (n_groups * N_BASE)
    for g, term in enumerate(spec.terms):
        degree = sum(e for _, e in term)
        if degree > max_degree:
            raise CapacityError(f"term degree {degree} exceeds {max_degree}")
        for kid, exp in term:
            entries[g * N_BASE + BASE_IDS.index(kid)] = exp
    return KernelCode(tuple(entries), max_degree=max_degree)


def decode(code) -> CompositeKernelSpec:
    if not isinstance(code, KernelCode):
        code = KernelCode(tuple(code))
    terms = []
    for group in code.groups():
        if any(group):
            terms.append(tuple((BASE_IDS[i], v) for i, v in enumerate(group) if v))
    return CompositeKernelSpec(tuple(terms))


def base_code(kid: str, n_groups: int = N_GROUPS) -> KernelCode:
    entries = [0] * (n_groups * N_BASE)
    entries[BASE_IDS.index(resolve_id(kid))] = 1
    return KernelCode(tuple(entries))


def base_codes(n_groups: int = N_GROUPS) -> list[KernelCode]:
    return [base_code(k, n_groups) for k in BASE_IDS]


def code_from_string(text: str, n_groups: int = N_GROUPS) -> KernelCode:
    """Accept either a bracketed integer code or a kernel expression."""
    s = text.strip()
    if s.startswith("["):
        vals = [int(v) for v in s.strip("[]").split(",") if v.strip()]
        return KernelCode(tuple(vals))
    return encode(CompositeKernelSpec.parse(s), n_groups)


# ---------------------------------------------------------------- composition
def add_base(code: KernelCode, kid: str) -> KernelCode | None:
    """``code + kid`` as a new group, or None when every group is occupied."""
    idx = BASE_IDS.index(resolve_id(kid))
    groups = [list(g) for g in code.groups()]
    for g in groups:
        if not any(g):
            g[idx] = 1
            return KernelCode(tuple(v for gg in groups for v in gg), code.max_degree)
    return None


def multiply_base(code: KernelCode, kid: str) -> KernelCode | None:
    """``code * kid`` distributed over every term, or None if a term overflows."""
    idx = BASE_IDS.index(resolve_id(kid))
    groups = [list(g) for g in code.groups()]
    for g in groups:
        if any(g):
            if sum(g) + 1 > code.max_degree or g[idx] + 1 > MAX_EXPONENT:
                return None
            g[idx] += 1
    return KernelCode(tuple(v for gg in groups for v in gg), code.max_degree)


# ------------------------------------------------------------------- sampling
@dataclass(frozen=True)
class CombinerConfig:
    base_probs: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    op_probs: tuple = (1 / 3, 1 / 3, 1 / 3)  # add, multiply, end
    max_degree: int = MAX_DEGREE
    max_groups: int = N_GROUPS
    dataset_size: int = 2000

    def __post_init__(self):
        for name, p, k in (("base_probs", self.base_probs, N_BASE),
                           ("op_probs", self.op_probs, len(OPERATORS))):
            if len(p) != k or any(v < 0 for v in p) or abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a distribution over {k} outcomes")
        if not 1 <= self.max_degree <= MAX_EXPONENT:
            raise ValueError("max_degree must lie in 1..3")
        if self.max_groups < 1:
            raise ValueError("max_groups must be >= 1")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be >= 1")


def sample_kernel(rng: np.random.Generator, cfg: CombinerConfig) -> KernelCode:
    """Draw one composite kernel by a random walk over add/multiply/end."""
    base_p = np.asarray(cfg.base_probs)
    op_p = np.asarray(cfg.op_probs)
    groups = [[0] * N_BASE]
    groups[0][rng.choice(N_BASE, p=base_p)] += 1
    while True:
        for _ in range(RETRY_CAP):
            op = OPERATORS[rng.choice(3, p=op_p)]
            if op == "end":
                break
            b = rng.choice(N_BASE, p=base_p)
            if op == "multiply":
                if sum(groups[-1]) < cfg.max_degree:
                    groups[-1][b] += 1
                    break
            elif len(groups) < cfg.max_groups:
                g = [0] * N_BASE
                g[b] = 1
                groups.append(g)
                break
        else:
            raise GenerationError(
                f"no admissible operator after {RETRY_CAP} retries"
            )
        if op == "end":
            break
    groups += [[0] * N_BASE] * (cfg.max_groups - len(groups))
    return KernelCode(tuple(v for g in groups for v in g), cfg.max_degree)


def generate_dataset(rng: np.random.Generator, cfg: CombinerConfig,
                     include=()) -> list[KernelCode]:
    """``cfg.dataset_size`` distinct codes; codes in ``include`` come first."""
    seen = dict.fromkeys(include)
    limit = 200 * cfg.dataset_size
    draws = 0
    while len(seen) < cfg.dataset_size:
        if draws >= limit:
            raise GenerationError(
                f"only {len(seen)} distinct codes after {draws} draws"
            )
        seen.setdefault(sample_kernel(rng, cfg))
        draws += 1
    return list(seen)[: max(cfg.dataset_size, len(include))]


# ------------------------------------------------------ data representation
def base_matrices(X, hyper: Hyperparams | None = None) -> np.ndarray:
    """Stack of the five base covariance matrices on X, shape (5, n, n)."""
    hyper = hyper or Hyperparams()
    geom = Geometry(X)
    return np.stack([base_matrix(k, geom, hyper) for k in BASE_IDS])


def composite_from_bases(code: KernelCode, mats: np.ndarray) -> np.ndarray:
    out = np.zeros(mats.shape[1:])
    for group in code.groups():
        if not any(group):
            continue
        term = np.ones(mats.shape[1:])
        for i, e in enumerate(group):
            for _ in range(e):
                term = term * mats[i]
        out += term
    return out


def data_representation(code: KernelCode, X, hyper: Hyperparams | None = None,
                        mats: np.ndarray | None = None) -> np.ndarray:
    """Frobenius distances from the composite's covariance to each base's."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1 or X.size == 0:
        raise ValueError("data representation needs at least one observation")
    if mats is None:
        mats = base_matrices(X, hyper)
    mc = composite_from_bases(code, mats)
    return np.sqrt(((mc[None] - mats) ** 2).sum(axis=(1, 2)))


def representation(code: KernelCode, X, hyper: Hyperparams | None = None,
                   mats: np.ndarray | None = None) -> np.ndarray:
    """``[r_c, r_d]`` with r_d divided by ``n * max(1, mean|M_C|)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        raise ValueError("data representation needs at least one observation")
    if mats is None:
        mats = base_matrices(X, hyper)
    n = X.shape[0]
    mc = composite_from_bases(code, mats)
    rd = np.sqrt(((mc[None] - mats) ** 2).sum(axis=(1, 2)))
    rd = rd / (n * max(1.0, float(np.abs(mc).mean())))
    return np.concatenate([code.as_array(), rd])


def representations(codes, X, hyper: Hyperparams | None = None) -> np.ndarray:
    mats = base_matrices(X, hyper)
    return np.stack([representation(c, X, mats=mats) for c in codes])


# ------------------------------------------------------------ one-hot ablation
ONE_HOT_SLOTS = 5
_OP_BITS = {"*": "010", "+": "001", None: "000"}


def one_hot_tokens(spec: CompositeKernelSpec, slots: int = ONE_HOT_SLOTS) -> list[str]:
    """Token strings: kernel (5 bits) and operator (3 bits) alternating."""
    factors = []
    for t, term in enumerate(spec.terms):
        flat = [k for k, e in term for _ in range(e)]
        for j, k in enumerate(flat):
            op = "*" if j < len(flat) - 1 else ("+" if t < len(spec.terms) - 1 else None)
            factors.append((k, op))
    if len(factors) > slots:
        raise CapacityError(f"{len(factors)} factors exceed {slots} one-hot slots")
    tokens = []
    for i in range(slots):
        if i < len(factors):
            k, op = factors[i]
            bits = ["0"] * N_BASE
            bits[N_BASE - 1 - BASE_IDS.index(k)] = "1"
            tokens.append("".join(bits))
        else:
            k, op = None, None
            tokens.append("0" * N_BASE)
        if i < slots - 1:
            tokens.append(_OP_BITS[op])
    return tokens


def one_hot_encode(spec: CompositeKernelSpec, slots: int = ONE_HOT_SLOTS) -> np.ndarray:
    bits = "".join(one_hot_tokens(spec, slots))
    return np.array([int(b) for b in bits], dtype=np.int8)


def one_hot_length(slots: int = ONE_HOT_SLOTS) -> int:
    return slots * N_BASE + (slots - 1) * 3


def one_hot_fits(code: KernelCode, slots: int = ONE_HOT_SLOTS) -> bool:
    return sum(code.entries) <= slots


def nearest_one_hot_code(bits, slots: int = ONE_HOT_SLOTS,
                         n_groups: int = N_GROUPS) -> KernelCode:
    """Decode a real-valued one-hot vector to the closest admissible code.

    Each kernel slot takes its strongest bit (empty when all bits are below
    0.5); each operator slot picks ``*``, ``+`` or end.  Parsing stops at the
    first empty slot or end marker; factors that would overflow the code's
    capacity are dropped.
    """
    b = np.asarray(bits, dtype=float).ravel()
    width = N_BASE + 3
    terms = [[]]
    first_kernel = None
    for i in range(slots):
        tok = b[i * width:i * width + N_BASE]
        if first_kernel is None:
            first_kernel = N_BASE - 1 - int(np.argmax(tok))
        if tok.max() < 0.5:
            break
        terms[-1].append(BASE_IDS[N_BASE - 1 - int(np.argmax(tok))])
        if i == slots - 1:
            break
        op = b[i * width + N_BASE:(i + 1) * width]
        if op.max() < 0.5:
            break
        if int(np.argmax(op)) == 1:  # "010" -> multiply
            continue
        if int(np.argmax(op)) == 2:  # "001" -> add
            terms.append([])
        else:
            break
    groups = []
    for factors in terms:
        if not factors or len(groups) == n_groups:
            continue
        g = [0] * N_BASE
        for k in factors:
            if sum(g) < MAX_DEGREE:
                g[BASE_IDS.index(k)] += 1
        groups.append(g)
    if not groups:
        g = [0] * N_BASE
        g[first_kernel] = 1
        groups.append(g)
    groups += [[0] * N_BASE] * (n_groups - len(groups))
    return KernelCode(tuple(v for g in groups for v in g))


__all__ = [
    "ALIASES", "BASE_IDS", "CapacityError", "CombinerConfig", "CompositeKernelSpec",
    "GenerationError", "GrammarError", "InvalidCodeError", "KernelCode",
    "add_base", "base_code", "base_codes", "base_matrices", "canonicalize",
    "code_from_string", "composite_from_bases", "data_representation", "decode",
    "encode", "generate_dataset", "multiply_base", "one_hot_encode",
    "one_hot_length", "one_hot_tokens", "representation", "representations",
    "nearest_one_hot_code", "one_hot_fits", "sample_kernel",
]
