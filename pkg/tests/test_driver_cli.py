import io
import math

import numpy as np
import pytest

from kernelbo import cli, driver
from kernelbo.driver import RunConfig
from kernelbo.vae import TrainConfig

# small settings so each run takes well under a second or two
SMALL = RunConfig(objective="branin", budget=12, r_init=5, relearn=5, kergpr_iters=3,
                  combiner_size=60, vae=TrainConfig(epochs=10), n_candidates=256)


@pytest.fixture(scope="module")
def kobo_run():
    return driver.run(SMALL)


def test_random_search_degenerate_budget():
    res = driver.run(SMALL.with_(budget=5, method="fixed:SE"))
    assert len(res.trace) == 5
    assert [r.iteration for r in res.trace] == [1, 2, 3, 4, 5]


def test_trace_shape_and_monotone_best(kobo_run):
    res = kobo_run
    assert len(res.trace) == SMALL.budget == res.evaluations
    best = res.best_series()
    assert np.all(np.diff(best) <= 0)
    assert best[-1] == res.f_series().min() == res.best_f
    assert all(r.regret == pytest.approx(r.best_f - 0.397887) for r in res.trace)
    assert len(res.rounds) == 2  # n = 5 and n = 10


def test_fixed_kernel_has_no_latent_evals():
    res = driver.run_fixed_kernel(SMALL, "PER")
    assert len(res.trace) == SMALL.budget
    assert all(r.latent_evals == 0 for r in res.trace)
    assert all(r.kernel.startswith("PER ") for r in res.trace)


def test_methods_share_initial_design():
    pts = {}
    for m in ("kobo", "fixed:LIN", "cks"):
        res = driver.run(SMALL.with_(method=m, budget=6))
        pts[m] = np.array([r.point for r in res.trace[:SMALL.r_init]])
    assert np.array_equal(pts["kobo"], pts["fixed:LIN"])
    assert np.array_equal(pts["kobo"], pts["cks"])


@pytest.mark.parametrize("method", ["mcmc", "cks", "boms", "onehot-ablation"])
def test_baselines_run_and_respect_budget(method):
    res = driver.run(SMALL.with_(method=method, budget=10))
    assert len(res.trace) == 10
    budget = SMALL.kergpr_iters + 6
    for rd in res.rounds:
        assert len(rd["records"]) <= budget


def test_determinism(kobo_run):
    again = driver.run(SMALL)
    assert driver.trace_csv(again, wall=False) == driver.trace_csv(kobo_run, wall=False)


def test_trace_roundtrip(tmp_path, kobo_run):
    p = tmp_path / "t.csv"
    driver.write_trace(kobo_run, p)
    rows = driver.read_trace(p)
    assert list(rows[0]) == list(driver.TRACE_COLUMNS)
    assert len(rows) == SMALL.budget
    assert float(rows[-1]["best_f"]) == pytest.approx(kobo_run.best_f, rel=1e-8)


def test_regret_helpers():
    class R:
        def __init__(self, b, f):
            self.best_f, self.f = b, f

    trace = [R(5, 5), R(3, 3), R(3, 4), R(1, 1)]
    assert driver.regret([r.best_f for r in trace], 1.0).tolist() == [4, 2, 2, 0]
    assert driver.regret(trace[:1], None) is None
    assert driver.evaluations_to(trace, 1.0, 2.0) == 2
    assert driver.evaluations_to(trace, 0.0, 0.5) is None
    assert driver.f_range(trace) == 4


def test_summarize_counts_misses():
    res = driver.compare(SMALL.with_(budget=6), ["fixed:SE"], [0, 1])
    rows = driver.summarize(res)
    assert rows[0]["runs"] == 2 and math.isfinite(rows[0]["median_final_regret"])


def test_surrogate_minimum_reported(kobo_run):
    assert kobo_run.surrogate_x is not None and kobo_run.surrogate_x.shape == (2,)
    assert np.isfinite(kobo_run.surrogate_f)


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(r_init=0)
    with pytest.raises(ValueError):
        RunConfig(budget=3, r_init=5)
    with pytest.raises(ValueError):
        RunConfig(method="grid")


def test_fixed_per_beats_lin_on_periodic_truth():
    cfg = RunConfig(objective="gp:PER", dims=1, budget=15, r_init=5, n_candidates=256)
    per, lin = [], []
    for s in range(10):
        per.append(driver.run_fixed_kernel(cfg.with_(seed=s), "PER").trace[-1].best_f)
        lin.append(driver.run_fixed_kernel(cfg.with_(seed=s), "LIN").trace[-1].best_f)
    # regret differences equal best_f differences since f* is shared per seed
    assert np.median(per) <= np.median(lin)


# ------------------------------------------------------------------ series
def test_fit_series_linear():
    t = np.linspace(0, 1, 30)
    v = 2 * t + 1
    fit = driver.fit_series(SMALL, series=(t, v), prefix_fraction=0.6, method="fixed:LIN")
    assert fit.grid.shape == fit.mean.shape == fit.std.shape == (30,)
    assert np.allclose(fit.mean, v, atol=0.05)
    assert set(fit.base_evidence) == {"SE", "PER", "RQ", "MAT", "LIN"}


def test_fit_series_needs_points():
    with pytest.raises(ValueError):
        driver.fit_series(SMALL, series=(np.arange(5.0), np.arange(5.0)), prefix_fraction=0.5)


# -------------------------------------------------------------------- CLI
SMALL_FLAGS = ["--kergpr-iters", "3", "--combiner-size", "60", "--vae-epochs", "10",
               "--n-candidates", "256"]


def test_cli_run_writes_trace(tmp_path, capsys):
    out = tmp_path / "t.csv"
    code = cli.main(["run", "--objective", "branin", "--budget", "8", *SMALL_FLAGS,
                     "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(driver.TRACE_COLUMNS) and len(lines) == 9
    assert "best" in capsys.readouterr().err


def test_cli_config_file_and_override(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("# comment\nobjective = branin\nbudget = 20\nkergpr_iters = 3\n")
    out = tmp_path / "t.csv"
    assert cli.main(["run", "--config", str(cfgfile), "--budget", "6", "--method", "fixed:SE",
                     "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 7


@pytest.mark.parametrize("argv", [
    ["run", "--objective", "nope"],
    ["run", "--bogus-flag", "1"],
    ["run", "--objective", "branin", "--budget", "3", "--r-init", "5"],
    ["compare", "--methods", "kobo,grid", "--objective", "branin"],
])
def test_cli_input_errors_exit_1(argv, capsys):
    assert cli.main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_cli_bad_config_key(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("colour = blue\n")
    assert cli.main(["run", "--config", str(cfgfile)]) == 1


def test_cli_interactive_session(monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO("7.5\nabc\n3\n1\n2\n4\n"))
    code = cli.main(["run", "--interactive", "--dims", "2", "--budget", "5",
                     "--method", "fixed:SE"])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert sum(line.startswith("QUERY") for line in out) == 5
    assert sum(line.startswith("RETRY 1") for line in out) == 1


def test_cli_interactive_eof_exits_2(monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO("1\n"))
    assert cli.main(["run", "--interactive", "--dims", "1", "--budget", "3", "--r-init", "2",
                     "--method", "fixed:SE"]) == 2


def test_cli_compare_and_recover(tmp_path, capsys):
    assert cli.main(["compare", "--objective", "branin", "--budget", "6", "--methods",
                     "fixed:SE,fixed:LIN", "--seeds", "0-1", "--out-dir",
                     str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "method,runs,median_final_regret,median_evals_to_eps"
    assert len(out) == 3
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "fixed-LIN_seed0.csv", "fixed-LIN_seed1.csv", "fixed-SE_seed0.csv",
        "fixed-SE_seed1.csv"]
    assert cli.main(["recover-kernel", "--truth", "PER", "--q", "10", *SMALL_FLAGS]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "truth = PER"
    assert [line.split()[0] for line in out[1:]] == ["Q=5", "Q=10"]


def test_cli_fit_series(tmp_path, capsys):
    p = tmp_path / "s.csv"
    t = np.linspace(0, 5, 25)
    p.write_text("t,v\n" + "".join(f"{a},{np.sin(a)}\n" for a in t))
    assert cli.main(["fit-series", "--csv", str(p), *SMALL_FLAGS]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "t,mean,std" and len(out) == 26
    assert cli.main(["fit-series", "--csv", str(tmp_path / "missing.csv")]) == 1
