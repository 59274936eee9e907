"""Command-line entry point: ``musci {simulate,fit,predict,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import warnings
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .dataset import SchemaError, load_csv
from .federate import WeightScheme
from .predict import FittedPredictor, MethodSpec, StageError, musci_fit
from .scores import ScoreKind
from .simulate import ScenarioConfig, run_scenario, write_outputs

log = logging.getLogger("musci")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
GRID_KEYS = ("n_k", "covariate_shift", "error_type", "concept_shift", "score", "propensity_range")


class UsageError(Exception):
    pass


def _fail(msg: str, code: int) -> int:
    print(f"musci: error: {msg}", file=sys.stderr)
    return code


# -- config ------------------------------------------------------------------

def load_schema() -> dict:
    return json.loads(resources.files("musci").joinpath("run_config.schema.json").read_text("utf-8"))


def read_config(path) -> dict:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
        doc = json.loads(text)
    except UnicodeDecodeError as exc:
        raise UsageError(f"{path}: not UTF-8 (byte offset {exc.start})") from None
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise UsageError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from None
    errors = sorted(jsonschema.Draft202012Validator(load_schema()).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise UsageError(f"{path}: config does not match schema:\n  " + "\n  ".join(lines))
    return doc


def scenarios_from(doc: dict, seed: int) -> list[ScenarioConfig]:
    defaults = dict(doc.get("defaults", {}))
    entries = [dict(e) for e in doc.get("scenarios", [])]
    grid = doc.get("grid")
    if grid:
        keys = [k for k in GRID_KEYS if k in grid]
        for combo in itertools.product(*(grid[k] for k in keys)):
            entries.append(dict(zip(keys, combo)))
    out = []
    for e in entries:
        merged = {**defaults, **e}
        if "lambda" in merged:
            merged["lam"] = merged.pop("lambda")
        if "methods" in merged:
            merged["methods"] = tuple(merged["methods"])
        try:
            out.append(ScenarioConfig(seed=seed, **merged))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return out


# -- commands ----------------------------------------------------------------

def env_seed(default: int) -> int:
    """``MUSCI_SEED`` overrides any configured seed."""
    raw = os.environ.get("MUSCI_SEED", "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError("MUSCI_SEED must be an integer") from None


def cmd_simulate(args) -> int:
    doc = read_config(args.config)
    seed = env_seed(int(doc.get("seed", 0)))
    out_dir = args.out or doc.get("output_dir")
    if not out_dir:
        raise UsageError("no output directory (use --out or output_dir in the config)")
    workers = args.workers or int(doc.get("workers", os.cpu_count() or 1))
    configs = scenarios_from(doc, seed)
    summaries = []
    for cfg in configs:
        log.info("scenario %s: %d replications", cfg.name, cfg.replications)
        summaries.append(run_scenario(cfg, workers))
    write_outputs(summaries, out_dir, {"seed": seed, "config": doc})
    return EXIT_OK


def cmd_fit(args) -> int:
    if not 0 < args.alpha < 0.5:
        raise UsageError(f"--alpha must lie in (0, 0.5), got {args.alpha}")
    try:
        data = load_csv(args.data)
    except SchemaError as exc:
        raise UsageError(str(exc)) from None
    kind = {"federated": "federated", "target-only": "target-only", "pooled": "pooled-ccod",
            "equal": "equal-weights"}[args.method]
    method = MethodSpec(kind, WeightScheme(args.scheme), args.lam, args.objective, args.folds)
    seed = env_seed(args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fp = musci_fit(data, args.alpha, args.score, method, seed, G=args.grid_size)
    for w in caught:
        print(f"musci: warning: {w.message}", file=sys.stderr)
    fp.to_json(args.out)
    return EXIT_OK


def _read_covariates(path, p: int) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        if len(xcols) != p:
            raise UsageError(f"{path}: predictor expects {p} covariates, file has {len(xcols)}")
        idx = [header.index(f"x{j + 1}") if f"x{j + 1}" in header else None for j in range(p)]
        if None in idx:
            raise UsageError(f"{path}: covariate columns must be named x1..x{p}")
        rows = []
        for row in reader:
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise UsageError(f"{path}:{reader.line_num}: cannot parse covariates") from None
    return np.array(rows, dtype=float).reshape(len(rows), p)


def cmd_predict(args) -> int:
    try:
        fp = FittedPredictor.from_json(Path(args.predictor).read_text(encoding="utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.predictor}: cannot load predictor ({exc})") from None
    xs = _read_covariates(args.covariates, fp.covariate_dim)
    lo, hi = fp.bounds(xs) if len(xs) else (np.array([]), np.array([]))
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lower", "upper", "empty"])
        for a, b in zip(lo, hi):
            empty = a > b
            w.writerow(["", "", 1] if empty else [repr(float(a)), repr(float(b)), 0])
    return EXIT_OK


REPORT_REQUIRED = ("scenario", "method", "coverage", "width")


def cmd_report(args) -> int:
    path = Path(args.replications)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in REPORT_REQUIRED if c not in cols]
        if missing:
            raise UsageError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise UsageError(f"{path}: no data rows")
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["method"]), []).append((float(r["coverage"]), float(r["width"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "replications", "CP", "sd_CP", "wd", "sd_wd"])
        for (scen, meth), vals in groups.items():
            v = np.array(vals)
            sd = v.std(axis=0, ddof=1) if len(v) > 1 else np.zeros(2)
            w.writerow([scen, meth, len(v), repr(float(v[:, 0].mean())), repr(float(sd[0])),
                        repr(float(v[:, 1].mean())), repr(float(sd[1]))])
    with (out / "boxplot_long.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "metric", "value"])
        for r in rows:
            w.writerow([r["scenario"], r["method"], "coverage", r["coverage"]])
            w.writerow([r["scenario"], r["method"], "width", r["width"]])
    local = path.with_name("local_coverage.csv")
    if local.exists():
        with local.open(newline="", encoding="utf-8") as src, \
                (out / "local_curves.csv").open("w", newline="", encoding="utf-8") as dst:
            w = csv.writer(dst, lineterminator="\n")
            for row in csv.reader(src):
                w.writerow(row)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="musci", description="Multi-source conformal prediction intervals.")
    p.add_argument("--version", action="version", version=f"musci {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run Monte Carlo scenarios from a JSON config")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.add_argument("--workers", type=int, help="worker processes (default: config, then CPU count)")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a predictor on a dataset CSV")
    f.add_argument("data")
    f.add_argument("--out", required=True)
    f.add_argument("--alpha", type=float, default=0.1)
    f.add_argument("--score", choices=[k.value for k in ScoreKind], default="asr")
    f.add_argument("--method", choices=["federated", "target-only", "pooled", "equal"], default="federated")
    f.add_argument("--scheme", choices=["fed1", "fed2", "fed3"], default="fed2")
    f.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed penalty (default: cross-validated)")
    f.add_argument("--objective", choices=["algorithm", "equation"], default="algorithm")
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--grid-size", type=int, default=40)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("predict", help="intervals for new target covariates")
    r.add_argument("predictor")
    r.add_argument("covariates")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    t = sub.add_parser("report", help="summary tables from replications.csv")
    t.add_argument("replications")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except FileNotFoundError as exc:
        return _fail(f"{exc.filename}: no such file", EXIT_USAGE)
    except StageError as exc:
        return _fail(f"stage '{exc.stage}' failed: {exc.cause}", EXIT_RUNTIME)
    except Exception as exc:  # anything else is a runtime failure
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
