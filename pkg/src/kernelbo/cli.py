"""Command-line entry point.

Trace CSV columns (one row per objective evaluation):

  iter          1-based evaluation index
  point         evaluated point, coordinates joined by ';'
  f             observed objective value
  best_f        best value observed so far
  regret        best_f minus the known optimum (empty when unknown)
  kernel        active kernel expression followed by its grammar code
  evidence      per-observation log evidence of the active kernel
  latent_evals  cumulative evidence evaluations spent by kernel search
  wall_ms       elapsed wall-clock milliseconds

Floats use 9 significant digits.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import driver
from .grammar import GrammarError
from .objectives import (
    OBJECTIVES,
    OracleSession,
    ProtocolError,
    SeriesParseError,
    SessionError,
)
from .vae import TrainConfig

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


# flag name -> (type, RunConfig field or None, help)
RUN_FLAGS = {
    "objective": (str, "objective", f"one of {', '.join(OBJECTIVES)}, interactive, gp:<kernel>"),
    "dims": (int, "dims", "ambient dimension N"),
    "embed-dim": (int, "embed_dim", "embedding dimension d (0 = none)"),
    "budget": (int, "budget", "objective evaluations"),
    "r-init": (int, "r_init", "initial random evaluations"),
    "relearn": (int, "relearn", "kernel-learning period v"),
    "kergpr-iters": (int, "kergpr_iters", "kernel-search iterations per round"),
    "method": (str, "method", "kobo, fixed:<SE|PER|RQ|MAT|LIN>, cks, mcmc, boms, onehot-ablation"),
    "combiner-size": (int, "combiner_size", "kernel codes sampled per round"),
    "n-candidates": (int, "n_candidates", "EI candidates per proposal"),
    "seed": (int, "seed", "random seed"),
    "vae-epochs": (int, None, "KerVAE training epochs"),
    "vae-width": (int, None, "KerVAE hidden width"),
    "vae-lr": (float, None, "KerVAE learning rate"),
    "vae-batch": (int, None, "KerVAE batch size"),
    "vae-beta": (float, None, "KerVAE KL weight"),
}
VAE_FIELDS = {"vae-epochs": "epochs", "vae-width": "width", "vae-lr": "lr",
              "vae-batch": "batch_size", "vae-beta": "beta"}


def _add_run_flags(p):
    for name, (typ, _, help_) in RUN_FLAGS.items():
        p.add_argument(f"--{name}", type=typ, default=None, help=help_)
    p.add_argument("--config", help="flat 'key = value' file; flags override it")


def load_config(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def _truthy(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def build_config(args, extra_keys=()) -> tuple[driver.RunConfig, dict]:
    """Merge defaults, the config file and command-line flags."""
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for name in list(RUN_FLAGS) + list(extra_keys):
        v = getattr(args, name.replace("-", "_"), None)
        if v is not None:
            values[name] = v
    cfg_kw, vae_kw, rest = {}, {}, {}
    for key, raw in values.items():
        if key in RUN_FLAGS:
            typ, field_name, _ = RUN_FLAGS[key]
            try:
                val = typ(raw)
            except ValueError as exc:
                raise InputError(f"bad value for {key}: {raw!r}") from exc
            if field_name is None:
                vae_kw[VAE_FIELDS[key]] = val
            else:
                cfg_kw[field_name] = val
        elif key in extra_keys:
            rest[key] = raw
        else:
            raise InputError(f"unknown config key {key!r}")
    if cfg_kw.get("method", "").lower().startswith("fixed:"):
        cfg_kw["method"] = "fixed:" + cfg_kw["method"].split(":", 1)[1].upper()
    try:
        base = driver.RunConfig()
        cfg = replace(base, vae=replace(base.vae, **vae_kw), **cfg_kw)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return cfg, rest


# ------------------------------------------------------------------ commands
def _summary(res: driver.RunResult, stream):
    print(f"best observed f = {res.best_f:.9g} at {_vec(res.best_x)}", file=stream)
    if res.surrogate_x is not None:
        print(f"surrogate argmin = {_vec(res.surrogate_x)} (predicted f = {res.surrogate_f:.9g})",
              file=stream)
    if res.f_star is not None:
        print(f"final regret = {res.best_f - res.f_star:.9g}", file=stream)
    if res.rounds:
        last = res.rounds[-1]
        print(f"final kernel = {last['kernel']} {last['code']}", file=stream)
    print(f"evaluations = {res.evaluations}", file=stream)


def _vec(x) -> str:
    return "[" + ", ".join(f"{float(v):.6g}" for v in x) + "]"


def cmd_run(args) -> int:
    cfg, rest = build_config(args, ("out", "interactive"))
    out = rest.get("out")
    interactive = _truthy(rest.get("interactive", False)) or cfg.objective == "interactive"
    cfg = replace(cfg, out=out, interactive=interactive)
    session = None
    if interactive:
        cfg = replace(cfg, objective="interactive")
        session = OracleSession(sys.stdin, sys.stdout)
    _check_objective(cfg.objective)
    res = driver.run(cfg, session=session)
    text = driver.trace_csv(res)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    elif not interactive:
        sys.stdout.write(text)
    _summary(res, sys.stderr)
    return EXIT_OK


def _check_objective(name: str):
    name = name.lower()
    if name in OBJECTIVES or name == "interactive" or name.startswith("gp:"):
        return
    raise InputError(f"unknown objective {name!r}")


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise InputError("no seeds given")
    return seeds


def cmd_compare(args) -> int:
    cfg, rest = build_config(args, ("methods", "seeds", "out-dir"))
    _check_objective(cfg.objective)
    try:
        methods = [m.strip() for m in rest.get("methods", "kobo,fixed:SE,cks,mcmc,boms").split(",")]
        methods = ["fixed:" + m.split(":", 1)[1].upper() if m.lower().startswith("fixed:") else m
                   for m in methods]
        seeds = _parse_seeds(rest.get("seeds", "0-9"))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for m in methods:
        if m not in driver.METHODS:
            raise InputError(f"unknown method {m!r}")
    out_dir = rest.get("out-dir", "compare_out")

    def progress(m, seed, res):
        print(f"done {m} seed {seed}: final best {res.best_f:.9g}", file=sys.stderr)

    results = driver.compare(cfg, methods, seeds, out_dir, progress)
    print("method,runs,median_final_regret,median_evals_to_eps")
    for row in driver.summarize(results):
        print(f"{row['method']},{row['runs']},{row['median_final_regret']:.9g},"
              f"{row['median_evals_to_eps']:.9g}")
    return EXIT_OK


def cmd_fit_series(args) -> int:
    cfg, rest = build_config(args, ("csv", "prefix", "out"))
    if "csv" not in rest:
        raise InputError("--csv is required")
    try:
        prefix = float(rest.get("prefix", 0.6))
    except ValueError as exc:
        raise InputError(f"bad prefix {rest.get('prefix')!r}") from exc
    if not 0 < prefix <= 1:
        raise InputError("prefix must lie in (0, 1]")
    try:
        fit = driver.fit_series(cfg, rest["csv"], prefix)
    except (OSError, SeriesParseError) as exc:
        raise InputError(str(exc)) from exc
    print(f"kernel = {fit.code.expression} {fit.code}", file=sys.stderr)
    print(f"evidence = {fit.evidence:.9g}", file=sys.stderr)
    lines = ["t,mean,std"] + [f"{t:.9g},{m:.9g},{s:.9g}"
                              for t, m, s in zip(fit.grid, fit.mean, fit.std)]
    text = "\n".join(lines) + "\n"
    if rest.get("out"):
        Path(rest["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_recover(args) -> int:
    cfg, rest = build_config(args, ("truth", "q"))
    if "truth" not in rest:
        raise InputError("--truth is required")
    try:
        q = int(rest.get("q", 25))
        rows = driver.recover_kernel(rest["truth"], q=q, seed=cfg.seed, cfg=cfg)
    except GrammarError as exc:
        raise InputError(str(exc)) from exc
    print(f"truth = {rows[0]['truth'] if rows else rest['truth']}")
    for row in rows:
        print(f"Q={row['q']} kernel = {row['kernel']} {row['code']} "
              f"evidence = {row['evidence']:.9g}")
    return EXIT_OK


def cmd_vae_check(args) -> int:
    cfg, rest = build_config(args, ("size", "points"))
    vcfg = replace(cfg.vae, epochs=args.vae_epochs or TrainConfig().epochs, seed=cfg.seed)
    rep = driver.vae_check(int(rest.get("size", 2000)), int(rest.get("points", 10)),
                           seed=cfg.seed, train_cfg=vcfg)
    print(f"codes = {rep['codes']}")
    print(f"exact recovery = {rep['recovered']}/{rep['codes']} ({rep['recovery']:.4f})")
    print(f"reconstruction mse = {rep['mse']:.6g}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kernelbo", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("run", help="one optimisation run, trace CSV to --out or stdout",
                       description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_flags(r)
    r.add_argument("--out")
    r.add_argument("--interactive", action="store_true", default=None,
                   help="query scores over stdin/stdout")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="several methods on shared seeds")
    _add_run_flags(c)
    c.add_argument("--methods", help="comma-separated methods")
    c.add_argument("--seeds", help="e.g. 0-9 or 0,3,5")
    c.add_argument("--out-dir", help="directory for per-run traces")
    c.set_defaults(func=cmd_compare)

    f = sub.add_parser("fit-series", help="learn a kernel on a series prefix and extrapolate")
    _add_run_flags(f)
    f.add_argument("--csv")
    f.add_argument("--prefix", type=float)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit_series)

    k = sub.add_parser("recover-kernel", help="kernel selected on a GP-sampled objective per Q")
    _add_run_flags(k)
    k.add_argument("--truth", help="ground-truth kernel, e.g. 'C+D' or 'PER*SE'")
    k.add_argument("--q", type=int)
    k.set_defaults(func=cmd_recover)

    v = sub.add_parser("vae-check", help="KerVAE reconstruction report")
    _add_run_flags(v)
    v.add_argument("--size", type=int)
    v.add_argument("--points", type=int)
    v.set_defaults(func=cmd_vae_check)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            stream=sys.stderr)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ProtocolError, SessionError) as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (GrammarError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
