import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize, minimize_scalar

from kernelbo.grammar import code_from_string
from kernelbo.objectives import (
    MICHALEWICZ_2D_MIN,
    ST_MINIMIZER,
    TRUTH_HYPER,
    DomainError,
    OracleSession,
    ProtocolError,
    SeriesParseError,
    SessionError,
    branin,
    embed_objective,
    hartmann6,
    interactive_objective,
    interactive_score,
    load_series_csv,
    make_embedding,
    make_objective,
    michalewicz,
    sample_gp_objective,
    staircase,
    styblinski_tang,
)

from oracles import k_naive


# --------------------------------------------------------------- functions
@pytest.mark.parametrize("x", [(math.pi, 2.275), (-math.pi, 12.275), (9.42478, 2.475)])
def test_branin_minimizers(x):
    assert abs(branin(x) - 0.397887) <= 1e-5


def test_branin_domain():
    with pytest.raises(DomainError):
        branin((11.0, 1.0))
    with pytest.raises(DomainError):
        branin((1.0, 1.0, 1.0))


def test_staircase_examples():
    assert staircase(np.zeros(50)) == 0.0
    assert staircase(np.ones(3)) == 3.0
    rng = np.random.default_rng(0)
    assert all(staircase(rng.uniform(-0.5, 0.5, 50)) == 0 for _ in range(100))
    with pytest.raises(DomainError):
        staircase([101.0])


@given(st.lists(st.tuples(st.integers(0, 99), st.booleans()), min_size=1, max_size=5),
       st.floats(0.0, 0.999))
def test_staircase_piecewise_constant(ks, frac):
    # |x + 0.5| moves within [k, k + 1) on either side of -0.5
    k = np.array([a for a, _ in ks], dtype=float)
    sign = np.array([-1.0 if neg else 1.0 for _, neg in ks])
    x0 = sign * k - 0.5
    x1 = sign * (k + frac) - 0.5
    if np.any(np.abs(x1) > 100):
        return
    assert staircase(x0) == staircase(x1) == np.sum(k**2)


def test_michalewicz_values():
    assert michalewicz(np.zeros(2)) == 0.0
    x = (2.20, 1.57)
    want = -(math.sin(2.20) * math.sin(2.20**2 / math.pi) ** 20
             + math.sin(1.57) * math.sin(2 * 1.57**2 / math.pi) ** 20)
    assert michalewicz(x) == pytest.approx(want, rel=1e-12)
    rng = np.random.default_rng(1)
    assert all(michalewicz(rng.uniform(0, math.pi, 4)) <= 0 for _ in range(200))


def test_michalewicz_2d_minimum_matches_search():
    res = minimize(michalewicz, (2.2, 1.57), method="L-BFGS-B",
                   bounds=[(0, math.pi)] * 2, options={"ftol": 1e-15, "gtol": 1e-12})
    assert res.fun == pytest.approx(MICHALEWICZ_2D_MIN, abs=1e-8)


def test_styblinski_tang():
    res = minimize_scalar(lambda x: 0.5 * (x**4 - 16 * x**2 + 5 * x),
                          bounds=(-5, 0), method="bounded", options={"xatol": 1e-10})
    assert res.x == pytest.approx(ST_MINIMIZER, abs=1e-6)
    for d in (1, 3):
        assert styblinski_tang(np.full(d, -2.903534)) == pytest.approx(-39.16617 * d, abs=1e-4)
    assert styblinski_tang(np.zeros(4)) == 0.0


def test_hartmann6_minimum():
    obj = make_objective("hartmann6")
    assert hartmann6(obj.minimizers[0]) == pytest.approx(-3.3224, abs=1e-4)
    with pytest.raises(DomainError):
        hartmann6(np.zeros(5))


def test_make_objective_and_counter():
    obj = make_objective("branin")
    assert obj.dim == 2 and obj.f_star == 0.397887
    obj((0.0, 0.0))
    obj((1.0, 1.0))
    assert obj.evaluations == 2
    assert make_objective("staircase", 7).dim == 7
    with pytest.raises(KeyError):
        make_objective("rosenbrock")
    with pytest.raises(ValueError):
        make_objective("branin", 3)


# --------------------------------------------------------------- embedding
def test_embedding_pseudo_inverse():
    emb = make_embedding(20, 4, np.random.default_rng(0))
    assert np.allclose(emb.B @ emb.B_pinv, np.eye(4), atol=1e-10)
    assert np.array_equal(emb.lift(np.zeros(4)), np.zeros(20))
    lo, hi = emb.box
    assert np.allclose(hi, 2.0) and np.allclose(lo, -2.0)


def test_identity_embedding():
    emb = make_embedding(3, 3, np.random.default_rng(0), matrix=np.eye(3))
    y = np.array([0.1, -0.4, 0.7])
    assert np.allclose(emb.lift(y), y)


def test_embedding_projects_quadratic():
    # f(x) = |B x|^2 is recovered exactly at lifted points
    emb = make_embedding(10, 3, np.random.default_rng(2))
    y = np.random.default_rng(3).normal(size=3)
    assert np.sum((emb.B @ emb.lift(y)) ** 2) == pytest.approx(np.sum(y**2), rel=1e-10)


def test_embed_objective_counts_ambient_calls():
    base = make_objective("staircase", 30)
    wrapped, emb = embed_objective(base, 4, np.random.default_rng(0))
    wrapped(np.zeros(4))
    wrapped(np.ones(4))
    assert base.evaluations == 2 and wrapped.dim == 4
    with pytest.raises(ValueError):
        make_embedding(3, 4, np.random.default_rng(0))


def test_lift_clips_to_ambient_box():
    base = make_objective("staircase", 5)
    _, emb = embed_objective(base, 2, np.random.default_rng(0))
    assert np.all(np.abs(emb.lift(np.full(2, 1e6))) <= 100.0)


# -------------------------------------------------------------- GP-sampled
def test_gp_sample_interpolates_anchors():
    f = sample_gp_objective(code_from_string("PER"), ([0.0], [1.0]), None,
                            np.random.default_rng(0))
    assert np.allclose(f.evaluate(f.anchors), f.values, atol=1e-6)


def test_gp_sample_deterministic():
    a = sample_gp_objective("SE", ([0.0], [1.0]), 32, np.random.default_rng(4))
    b = sample_gp_objective("SE", ([0.0], [1.0]), 32, np.random.default_rng(4))
    x = np.linspace(0, 1, 11)[:, None]
    assert np.array_equal(a.evaluate(x), b.evaluate(x))


def test_gp_sample_covariance_monte_carlo():
    pts = np.array([[0.3], [0.38]])
    draws = np.array([
        sample_gp_objective("SE", ([0.0], [1.0]), None, np.random.default_rng(s)).evaluate(pts)
        for s in range(200)
    ])
    K = np.array([[k_naive("SE", a, b, TRUTH_HYPER) for b in pts] for a in pts])
    emp = np.cov(draws.T, bias=False)
    n = len(draws)
    for i, j in ((0, 0), (1, 1), (0, 1)):
        se = math.sqrt((K[i, i] * K[j, j] + K[i, j] ** 2) / n)
        assert abs(emp[i, j] - K[i, j]) <= 3 * se


def test_gp_sample_needs_anchors():
    with pytest.raises(ValueError):
        sample_gp_objective("SE", ([0.0], [1.0]), 1, np.random.default_rng(0))


# ------------------------------------------------------------------ series
def test_series_csv_parse(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("0,1.5\n1,2.5\n")
    t, v = load_series_csv(p)
    assert t.tolist() == [0.0, 1.0] and v.tolist() == [1.5, 2.5]


def test_series_csv_sorts_and_skips_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("t,value\n2,5\n0,3\n1,4\n")
    t, v = load_series_csv(p)
    assert t.tolist() == [0, 1, 2] and v.tolist() == [3, 4, 5]


def test_series_csv_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("0,1\n1,abc\n")
    with pytest.raises(SeriesParseError, match="line 2"):
        load_series_csv(p)
    p.write_text("")
    with pytest.raises(SeriesParseError):
        load_series_csv(p)


# ------------------------------------------------------------- interactive
def session(replies):
    out = io.StringIO()
    return OracleSession(io.StringIO("".join(r + "\n" for r in replies)), out), out


def test_interactive_reply():
    s, out = session(["7.5"])
    assert interactive_score(s, [0.1, 0.2]) == 7.5
    assert out.getvalue().startswith("QUERY 0 0.1,0.2")


def test_interactive_retry():
    s, out = session(["abc", "3"])
    assert interactive_score(s, [0.5]) == 3.0
    lines = out.getvalue().splitlines()
    assert lines[1].startswith("RETRY 0")


def test_interactive_out_of_range_passthrough():
    s, _ = session(["42"])
    assert interactive_score(s, [0.5]) == 42.0


def test_interactive_protocol_error_and_eof():
    s, _ = session(["x"] * 4)
    with pytest.raises(ProtocolError):
        interactive_score(s, [0.5])
    s, _ = session([])
    with pytest.raises(SessionError):
        interactive_score(s, [0.5])


def test_interactive_objective_negates():
    s, _ = session(["2", "5"])
    obj = interactive_objective(s, 2)
    assert obj([0.1, 0.1]) == -2.0 and obj([0.2, 0.2]) == -5.0
    assert obj.evaluations == 2 and s.next_id == 2
