"""Command line entry point: ``robustife estimate | simulate | weights``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Errors are reported on stderr as a single line
``error:<category>:<message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericalError, RobustIfeError
from .factor_ls import LsOptions
from .inference import b_tracy_widom, debiased_estimate, known_bound_estimate
from .montecarlo import (
    CalibratedSource,
    DgpSpec,
    calibrate_from_panel,
    emit_report,
    format_report,
    run_study,
    synthetic_policy_base,
)
from .panel import DeterministicSpec, load_panel_csv, profile_out
from .weights import select_weights

THREADS_ENV = "ROBUSTIFE_THREADS"
EXIT_CODES = {"usage": 1, "config": 1, "data": 2, "io": 2, "numerical": 3}
PATH_COLUMNS = ("mu", "s1_a", "fro_sq", "bbar", "var_factor", "lind", "objective", "pi_nuclear", "criterion", "anchor")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=LsOptions.seed, help="random seed (default %(default)s)")
    p.add_argument("--threads", type=int, default=None, help=f"worker processes (default ${THREADS_ENV} or 1)")
    p.add_argument("--output", "-o", default=None, help="output file (default stdout)")
    p.add_argument("--format", default=None, help="output format")
    return p


def _panel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("csv", help="long-format panel CSV")
    p.add_argument("--unit-col", default="unit")
    p.add_argument("--time-col", default="time")
    p.add_argument("--y-col", default="y")
    p.add_argument("--x-col", default="x")
    p.add_argument("--z-cols", default="", help="comma separated control columns")
    p.add_argument("--profile", default="", help='deterministic terms to profile out, e.g. "unit,time,trend2"')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustife", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"robustife {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _global_flags()

    est = sub.add_parser("estimate", parents=[common], help="debiased estimate and bias-aware CI for a CSV panel")
    _panel_flags(est)
    est.add_argument("--r", type=int, required=True, help="upper bound on the number of factors")
    est.add_argument("--epsilon", type=float, default=0.0)
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--b", type=float, default=None, help="bias weight for the weights (default 4R(sqrt N + sqrt T))")
    est.add_argument("--criterion", choices=("mse", "ci-length"), default="mse")
    est.add_argument("--case2-c", type=float, default=None, help="known bound on ||Gamma||_*; skips factor estimation")
    est.add_argument("--se-residuals", choices=("pre", "ls"), default="pre")
    est.add_argument("--lind-cap", type=float, default=None)
    est.add_argument("--max-iter", type=int, default=LsOptions.max_iter)
    est.add_argument("--n-starts", type=int, default=LsOptions.n_random_starts, help="random LS starts")

    sim = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo study from a JSON config")
    sim.add_argument("--config", required=True)

    wts = sub.add_parser("weights", parents=[common], help="dump the weight path and the selected weights")
    _panel_flags(wts)
    wts.add_argument("--r", type=int, default=1, help="rank used for the default b")
    wts.add_argument("--b", type=float, default=None)
    wts.add_argument("--criterion", choices=("mse", "ci-length"), default="mse")
    wts.add_argument("--alpha", type=float, default=0.05)
    return parser


def _load(args):
    schema = {
        "unit": args.unit_col,
        "time": args.time_col,
        "y": args.y_col,
        "x": args.x_col,
        "z": [c.strip() for c in args.z_cols.split(",") if c.strip()],
    }
    panel = load_panel_csv(args.csv, schema)
    return profile_out(panel, DeterministicSpec.parse(args.profile))


def _write(text: str, output) -> None:
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_estimate(args) -> int:
    if args.format not in (None, "json"):
        raise CliError("usage", "estimate only supports --format json")
    panel = _load(args)
    if args.case2_c is not None:
        fit = known_bound_estimate(
            panel, args.case2_c, alpha=args.alpha, b_override=args.b, criterion=args.criterion, lind_cap=args.lind_cap
        )
    else:
        opts = LsOptions(max_iter=args.max_iter, n_random_starts=args.n_starts, seed=args.seed)
        fit = debiased_estimate(
            panel,
            args.r,
            alpha=args.alpha,
            epsilon=args.epsilon,
            b_override=args.b,
            criterion=args.criterion,
            ls_options=opts,
            lind_cap=args.lind_cap,
            se_residuals=args.se_residuals,
        )
    doc = fit.to_dict()
    doc["n"], doc["t"], doc["k"] = panel.n_units, panel.n_periods, panel.n_controls
    _write(json.dumps(_jsonable(doc), indent=2) + "\n", args.output)
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def cmd_weights(args) -> int:
    panel = _load(args)
    b = args.b if args.b is not None else b_tracy_widom(args.r, *panel.shape)
    wm, path = select_weights(panel.x, list(panel.z), b, criterion=args.criterion, alpha=args.alpha, path_lind=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PATH_COLUMNS)
    for p in path:
        writer.writerow([repr(float(getattr(p, c))) if c != "anchor" else int(p.anchor) for c in PATH_COLUMNS])
    _write(buf.getvalue(), args.output)
    summary = (
        f"b={b:.6g} mu_star={wm.mu:.6g} s1_a={wm.s1:.6g} fro_a={wm.fro:.6g} "
        f"lind={wm.lind:.6g} pi_zero={str(wm.pi_zero).lower()}"
    )
    print(summary, file=sys.stdout if args.output else sys.stderr)
    return 0


# ---------------------------------------------------------------- simulate


def _cfg_get(cfg, key, kind, default=None, required=False):
    if key not in cfg:
        if required:
            raise CliError("config", f"{key}: missing required key")
        return default
    val = cfg[key]
    try:
        if kind is int:
            if isinstance(val, bool) or int(val) != val:
                raise ValueError
            return int(val)
        if kind is float:
            if isinstance(val, bool):
                raise ValueError
            return float(val)
        if kind is str:
            if not isinstance(val, str):
                raise ValueError
            return val
    except (TypeError, ValueError):
        raise CliError("config", f"{key}: expected {kind.__name__}, got {val!r}") from None
    return val


def _kappa_grid(cfg, r_true):
    raw = cfg.get("kappa", [0.0])
    if isinstance(raw, dict):
        try:
            start, stop, step = float(raw["start"]), float(raw["stop"]), float(raw["step"])
        except (KeyError, TypeError, ValueError):
            raise CliError("config", "kappa: grid needs numeric start, stop and step") from None
        if step <= 0 or stop < start:
            raise CliError("config", "kappa: need step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        raw = [round(start + i * step, 12) for i in range(count)]
    if not isinstance(raw, list) or not raw:
        raise CliError("config", "kappa: expected a nonempty list or a {start, stop, step} grid")
    grid = []
    for i, k in enumerate(raw):
        vec = k if isinstance(k, list) else [k] * max(r_true, 1)
        try:
            vec = tuple(float(v) for v in vec)
        except (TypeError, ValueError):
            raise CliError("config", f"kappa[{i}]: expected numbers, got {k!r}") from None
        if len(vec) != max(r_true, 1) or any(v < 0 for v in vec):
            raise CliError("config", f"kappa[{i}]: need {r_true} nonnegative values")
        grid.append(vec)
    return sorted(grid)


def load_study_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("config", f"<root>: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise CliError("config", "<root>: expected a JSON object")
    design = _cfg_get(cfg, "design", str, "factor")
    if design not in ("factor", "calibrated"):
        raise CliError("config", f"design: expected 'factor' or 'calibrated', got {design!r}")
    out = {
        "design": design,
        "r_true": _cfg_get(cfg, "r_true", int, 1),
        "n_reps": _cfg_get(cfg, "n_reps", int, 500),
        "seed": _cfg_get(cfg, "seed", int, 0),
        "alpha": _cfg_get(cfg, "alpha", float, 0.05),
        "epsilon": _cfg_get(cfg, "epsilon", float, 0.0),
        "sigma_u": _cfg_get(cfg, "sigma_u", float, 1.0),
        "sigma_v": _cfg_get(cfg, "sigma_v", float, 1.0),
        "beta": _cfg_get(cfg, "beta", float, 0.0),
    }
    out["r_est"] = _cfg_get(cfg, "r_est", int, max(out["r_true"], 1))
    est = cfg.get("estimators", ["ls", "debiased"])
    if not isinstance(est, list) or not est or any(e not in ("ls", "debiased") for e in est):
        raise CliError("config", f"estimators: expected a list drawn from ['ls', 'debiased'], got {est!r}")
    out["estimators"] = est
    if out["n_reps"] < 1:
        raise CliError("config", "n_reps: must be at least 1")
    if not 0 < out["alpha"] < 1:
        raise CliError("config", "alpha: must lie in (0, 1)")
    if design == "factor":
        out["n"] = _cfg_get(cfg, "n", int, required=True)
        out["t"] = _cfg_get(cfg, "t", int, required=True)
        out["kappa"] = _kappa_grid(cfg, out["r_true"])
    else:
        out["r_true"] = 1
        out["kappa"] = _kappa_grid(cfg, 1)
        src = cfg.get("source", "synthetic")
        if src == "synthetic":
            out["source"] = {
                "kind": "synthetic",
                "n": _cfg_get(cfg, "n", int, 48),
                "t": _cfg_get(cfg, "t", int, 33),
                "seed": _cfg_get(cfg, "synthetic_seed", int, 0),
            }
        elif isinstance(src, dict) and isinstance(src.get("csv"), str):
            out["source"] = {"kind": "csv", **src}
        else:
            raise CliError("config", "source: expected 'synthetic' or {\"csv\": path, ...}")
    return out


def _calibrated_base(cfg):
    src = cfg["source"]
    if src["kind"] == "synthetic":
        return synthetic_policy_base(src["n"], src["t"], seed=src["seed"], beta=cfg["beta"])
    schema = {k: src[k] for k in ("unit", "time", "y", "x") if k in src}
    panel = load_panel_csv(src["csv"], schema)
    if panel.n_controls:
        raise CliError("config", "source.csv: calibrated designs take a single regressor")
    panel = profile_out(panel, DeterministicSpec.parse(src.get("profile", "")))
    return calibrate_from_panel(panel)


def cmd_simulate(args, threads: int) -> int:
    cfg = load_study_config(args.config)
    fmt = args.format or "csv"
    if fmt not in ("csv", "markdown", "md"):
        raise CliError("usage", f"unknown report format {fmt!r}")
    base = _calibrated_base(cfg) if cfg["design"] == "calibrated" else None
    summaries = []
    say = (lambda s: print(s)) if args.output else (lambda s: print(s, file=sys.stderr))
    for kappa in cfg["kappa"]:
        if base is None:
            source = DgpSpec(
                n=cfg["n"],
                t=cfg["t"],
                r_true=cfg["r_true"],
                kappa=kappa,
                sigma_u=cfg["sigma_u"],
                sigma_v=cfg["sigma_v"],
                beta_true=cfg["beta"],
                seed=cfg["seed"],
            )
        else:
            source = CalibratedSource(base=base, kappa=kappa[0], seed=cfg["seed"])
        rows = run_study(
            source,
            cfg["n_reps"],
            estimators=cfg["estimators"],
            r_est=cfg["r_est"],
            alpha=cfg["alpha"],
            epsilon=cfg["epsilon"],
            ls_options=LsOptions(seed=args.seed),
            threads=threads,
        )
        summaries.extend(rows)
        for s in rows:
            kap = ",".join(f"{k:.2f}" for k in s.kappa)
            say(
                f"kappa={kap} {s.estimator}: bias={s.bias:.4f} std={s.std:.4f} rmse={s.rmse:.4f} "
                f"size={s.size:.4f} length={s.length:.4f} failures={s.failures}"
            )
    if args.output:
        emit_report(summaries, args.output, fmt, metadata={"config": cfg})
    else:
        sys.stdout.write(format_report(summaries, fmt))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise CliError("usage", "a command is required: estimate, simulate or weights")
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise CliError("usage", "--threads must be at least 1")
        if args.command == "estimate":
            return cmd_estimate(args)
        if args.command == "simulate":
            return cmd_simulate(args, threads)
        return cmd_weights(args)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except DataError as exc:
        category, msg = "data", str(exc)
    except NumericalError as exc:
        category, msg = "numerical", str(exc)
    except RobustIfeError as exc:
        category, msg = exc.category, str(exc)
    except OSError as exc:
        category, msg = "io", str(exc)
    print(f"error:{category}:{' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
