"""Command-line interface: ``longqte {estimate,curve,simulate,oracle}``.

Settings resolve as command-line flags over a flat ``key = value`` config
file (``--config``) over built-in defaults.  Every output document carries
the resolved settings, so a result file is enough to rerun it.

Exit status: 0 success, 2 bad input or settings, 3 numerical failure or a
failed replication.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings
from typing import Sequence

import numpy as np

from .data import DataError, Schema, ValidationError, check_tau, load_dataset, make_folds
from .estimator import EstimatorConfig, NumericalError, bundle_seed, estimate_qte
from .nuisance import NuisanceConfig
from .simulation import STUDY_NOISES, DEFAULT_TAUS, TRUE_QTE, NoiseSpec, SimConfig, SimReport, oracle_true_qte, run_study

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

DEFAULT_CURVE = tuple(round(0.05 * i, 2) for i in range(1, 20))
FULL_SIZES = (500, 1000, 2000)
FULL_REPS = 1000

# key -> (parser, default); None defaults mean "decided by the subcommand"
SETTINGS = {
    "input": (str, None),
    "schema": (str, None),
    "tau": (str, None),
    "folds": (int, 5),
    "seed": (int, 0),
    "clip": (float, 0.01),
    "components": (int, 3),
    "surrogate_components": (int, 2),
    "draws": (int, None),
    "reps": (int, None),
    "noise": (str, "gaussian"),
    "kappa": (int, None),
    "n_rct": (int, 1000),
    "n_obs": (int, None),
    "out": (str, None),
    "format": (str, None),
    "full": (lambda v: str(v).strip().lower() in ("1", "true", "yes", "on"), False),
}


class UsageError(Exception):
    """Invalid settings; reported with exit status 2."""


# ---------------------------------------------------------------- settings


def read_config_file(path: str) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment; unknown keys are rejected."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path!r}: {exc.strerror}") from None
    out = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise UsageError(f"{path}:{no}: unknown setting {key!r}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    merged = {k: default for k, (_, default) in SETTINGS.items()}
    if args.config:
        for key, value in read_config_file(args.config).items():
            try:
                merged[key] = SETTINGS[key][0](value)
            except ValueError:
                raise UsageError(f"bad value for {key!r}: {value!r}") from None
    for key in SETTINGS:
        value = getattr(args, key, None)
        if value is None or value is False:
            continue
        if key in ("tau", "schema"):
            value = ",".join(value) if key == "tau" else ";".join(value)
        merged[key] = value
    return merged


def parse_taus(text: str | None, default: Sequence[float]) -> tuple:
    if text is None or text == "":
        return tuple(default)
    try:
        taus = tuple(float(p) for p in text.replace(";", ",").split(",") if p.strip())
    except ValueError:
        raise UsageError(f"quantile levels must be numbers, got {text!r}") from None
    for tau in taus:
        check_tau(tau)
    if not taus:
        raise UsageError("at least one quantile level is required")
    return taus


def parse_schema(text: str | None) -> Schema:
    if not text:
        return Schema()
    mapping = {}
    for item in text.split(";"):
        if not item.strip():
            continue
        if "=" not in item:
            raise UsageError(f"schema entries look like KEY=COL[,COL...], got {item!r}")
        key, cols = (p.strip() for p in item.split("=", 1))
        mapping[key] = cols.split(",") if key in ("x", "s") else cols
    try:
        return Schema.from_mapping(mapping)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _check_ranges(cfg: dict) -> None:
    rules = {
        "folds": lambda v: v >= 2,
        "clip": lambda v: 0 <= v < 0.5,
        "components": lambda v: v >= 1,
        "surrogate_components": lambda v: v >= 1,
        "draws": lambda v: v is None or v >= 1,
        "reps": lambda v: v is None or v >= 1,
        "n_rct": lambda v: v >= 50,
        "n_obs": lambda v: v is None or v >= 50,
    }
    for key, ok in rules.items():
        if not ok(cfg[key]):
            raise UsageError(f"setting {key}={cfg[key]!r} is out of range")
    if cfg["format"] not in (None, "json", "csv", "table"):
        raise UsageError(f"unknown output format {cfg['format']!r}")


def estimator_config(cfg: dict) -> EstimatorConfig:
    nuis = NuisanceConfig(
        clip=cfg["clip"],
        outcome_components=cfg["components"],
        surrogate_components=cfg["surrogate_components"],
        mc_draws=cfg["draws"] or NuisanceConfig.mc_draws,
        seed=cfg["seed"],
    )
    return EstimatorConfig(nuisance=nuis, seed=cfg["seed"])


# ---------------------------------------------------------------- output


def atomic_write(path: str, text: str) -> None:
    """Write through a temporary file in the target directory, then rename over ``path``."""
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".longqte-", dir=dirname)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(cfg: dict, text: str) -> None:
    if cfg["out"]:
        atomic_write(cfg["out"], text)
    else:
        sys.stdout.write(text)


def _csv(rows: list, columns: Sequence[str], echo: dict | None) -> str:
    buf = io.StringIO()
    if echo is not None:
        for key in sorted(echo):
            buf.write(f"# {key}={json.dumps(echo[key], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def _table(rows: list, columns: Sequence[str]) -> str:
    head = "".join(f"{c:>12}" for c in columns)
    body = ["".join(f"{r[c]:>12.4f}" if isinstance(r[c], float) else f"{r[c]:>12}" for c in columns) for r in rows]
    return "\n".join([head, *body]) + "\n"


def _echo(cfg: dict, extra: dict) -> dict:
    doc = {k: v for k, v in cfg.items()}
    doc.update(extra)
    return doc


# ---------------------------------------------------------------- subcommands

RECORD_COLUMNS = ("tau", "q1", "q0", "delta", "ese", "ci_low", "ci_high", "j1", "j0")
CURVE_COLUMNS = ("tau", "delta", "ci_low", "ci_high")


def _load(cfg: dict):
    if not cfg["input"]:
        raise UsageError("--input is required")
    if not os.path.isfile(cfg["input"]):
        raise UsageError(f"input file {cfg['input']!r} does not exist")
    return load_dataset(cfg["input"], parse_schema(cfg["schema"]))


def _estimate(cfg: dict, taus: Sequence[float]):
    data = _load(cfg)
    est_cfg = estimator_config(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = estimate_qte(data, cfg["folds"], taus, est_cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    k = make_folds(data, cfg["folds"], est_cfg.seed).k
    echo = _echo(cfg, {
        "taus": list(taus), "n": data.n, "n_rct": data.n1, "n_obs": data.n0, "folds_used": k,
        "bundle_seeds": [bundle_seed(est_cfg.seed, j) for j in range(k)], "estimator": est_cfg.echo(),
    })
    return results, echo


def cmd_estimate(cfg: dict) -> int:
    taus = parse_taus(cfg["tau"], DEFAULT_TAUS)
    results, echo = _estimate(cfg, taus)
    rows = [{c: r.record()[c] for c in RECORD_COLUMNS} for r in results]
    fmt = cfg["format"] or "json"
    if fmt == "json":
        text = json.dumps({"command": "estimate", "config": echo, "results": rows}, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = _csv(rows, RECORD_COLUMNS, echo)
    else:
        text = _table(rows, RECORD_COLUMNS)
    _emit(cfg, text)
    return EXIT_OK


def cmd_curve(cfg: dict) -> int:
    taus = parse_taus(cfg["tau"], DEFAULT_CURVE)
    results, echo = _estimate(cfg, taus)
    rows = [{"tau": r.tau, "delta": r.delta_hat, "ci_low": r.ci.low, "ci_high": r.ci.high} for r in results]
    fmt = cfg["format"] or "csv"
    if fmt == "json":
        text = json.dumps({"command": "curve", "config": echo, "curve": rows}, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = _csv(rows, CURVE_COLUMNS, None)
        if cfg["out"]:
            atomic_write(cfg["out"] + ".config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    else:
        text = _table(rows, CURVE_COLUMNS)
    _emit(cfg, text)
    return EXIT_OK


def _noise(cfg: dict) -> NoiseSpec:
    return NoiseSpec.parse(cfg["noise"], cfg["kappa"])


def full_grid() -> list:
    """(noise, n_rct) cells of the complete replication table."""
    return [(noise, n) for noise in STUDY_NOISES for n in FULL_SIZES]


def cmd_simulate(cfg: dict) -> int:
    taus = parse_taus(cfg["tau"], DEFAULT_TAUS)
    est_cfg = estimator_config(cfg)
    if cfg["full"]:
        reps = cfg["reps"] or FULL_REPS
        cells = full_grid()
    else:
        reps = cfg["reps"] or 200
        cells = [(_noise(cfg), cfg["n_rct"])]
    rows, errors, wall = [], [], 0.0
    for noise, n_rct in cells:
        n_obs = cfg["n_obs"] if not cfg["full"] else None
        sim = SimConfig(n_rct=n_rct, n_obs=n_obs, noise=noise, taus=taus, k_folds=cfg["folds"], n_reps=reps, base_seed=cfg["seed"], estimator=est_cfg)
        rep = run_study(sim)
        rows.extend(rep.rows)
        errors.extend(rep.errors)
        wall += rep.wall_time
        print(f"{noise.label} n_rct={n_rct}: {reps} replications, {len(rep.errors)} failed", file=sys.stderr)
    report = SimReport(rows, wall)
    fmt = cfg["format"] or "csv"
    if fmt == "csv":
        text = report.to_csv()
        if cfg["out"]:
            echo = _echo(cfg, {"taus": list(taus), "reps": reps, "estimator": est_cfg.echo()})
            atomic_write(cfg["out"] + ".config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    elif fmt == "json":
        echo = _echo(cfg, {"taus": list(taus), "reps": reps, "estimator": est_cfg.echo()})
        recs = list(csv.DictReader(io.StringIO(report.to_csv())))
        text = json.dumps({"command": "simulate", "config": echo, "rows": recs}, indent=2, sort_keys=True) + "\n"
    else:
        text = report.to_table()
    _emit(cfg, text)
    if cfg["out"]:
        sys.stdout.write(report.to_table())
    for err in errors:
        print(f"replication failed: {err}", file=sys.stderr)
    return EXIT_NUMERIC if errors else EXIT_OK


def cmd_oracle(cfg: dict) -> int:
    taus = parse_taus(cfg["tau"], DEFAULT_TAUS)
    draws = cfg["draws"] or 10_000_000
    noise = _noise(cfg)
    truth = oracle_true_qte(noise, taus, draws, cfg["seed"])
    rows = [{"tau": tau, "qte": val, "analytic": TRUE_QTE} for tau, val in truth.items()]
    fmt = cfg["format"] or "table"
    if fmt == "json":
        echo = _echo(cfg, {"taus": list(taus), "draws": draws})
        text = json.dumps({"command": "oracle", "config": echo, "truth": rows}, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = _csv(rows, ("tau", "qte", "analytic"), _echo(cfg, {"taus": list(taus), "draws": draws}))
    else:
        text = f"noise: {noise.label}, draws: {draws}\n" + "".join(f"tau={r['tau']:<6g} QTE={r['qte']:.3f}\n" for r in rows)
    _emit(cfg, text)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "curve": cmd_curve, "simulate": cmd_simulate, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--tau", action="append", help="quantile level(s); repeatable or comma separated")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (default: standard output)")
    common.add_argument("--format", choices=("json", "csv", "table"))

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--folds", type=int, help="cross-fitting folds (default 5)")
    fit.add_argument("--clip", type=float, help="score clipping level (default 0.01)")
    fit.add_argument("--components", type=int, help="outcome mixture components (default 3)")
    fit.add_argument("--draws", type=int, help="Monte Carlo surrogate draws per unit (default 200)")

    noise = argparse.ArgumentParser(add_help=False)
    noise.add_argument("--noise", help="gaussian or scaled_t (also t3, t5, ...)")
    noise.add_argument("--kappa", type=int, help="degrees of freedom for scaled_t noise")

    parser = argparse.ArgumentParser(prog="longqte", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("estimate", "curve"):
        p = sub.add_parser(name, parents=[common, fit], help=f"{name} from a CSV file")
        p.add_argument("--input", help="CSV file with columns g, t, y, x*, s*")
        p.add_argument("--schema", action="append", help="column mapping KEY=COL[,COL...] for g, t, y, x, s")
    p = sub.add_parser("simulate", parents=[common, fit, noise], help="replication study")
    p.add_argument("--reps", type=int)
    p.add_argument("--n-rct", dest="n_rct", type=int)
    p.add_argument("--n-obs", dest="n_obs", type=int)
    p.add_argument("--full", action="store_true", help=f"all noise laws x n_rct in {FULL_SIZES}, {FULL_REPS} replications (multi-hour)")
    p = sub.add_parser("oracle", parents=[common, noise], help="Monte Carlo ground truth")
    p.add_argument("--draws", type=int, help="draws per potential outcome (default 10^7)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        _check_ranges(cfg)
        return COMMANDS[args.command](cfg)
    except (UsageError, DataError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
