"""Command-line interface: ``trial-adjust analyze`` and ``trial-adjust simulate``.

Exit codes: 0 success, 1 user error (bad input, config or arguments),
2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .analysis import AnalysisRequest, analyze_trial
from .errors import TrialAdjustError
from .estimators import EstimatorKind
from .io import (
    Bindings,
    read_trial_csv,
    report_to_csv,
    report_to_json,
    rows_to_csv,
    write_report,
)
from .variance import VARIANCE_MODES

log = logging.getLogger("trial_adjust")

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

_CONTRASTS = {"diff": "difference", "ratio": "ratio", "or": "odds-ratio"}
# simulation summary fields shown in percent in the CSV projection
_SIM_PERCENT = ("relative_bias", "coverage", "power", "type1_error", "relative_efficiency")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _estimators(text):
    if text.strip().lower() == "all":
        return tuple(k.value for k in EstimatorKind)
    return tuple(EstimatorKind.parse(s).value for s in _split(text))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trial-adjust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    an = sub.add_parser("analyze", help="analyse a trial CSV")
    an.add_argument("--data", required=True, help="CSV file with a header row")
    an.add_argument("--outcome", required=True)
    an.add_argument("--arm", required=True)
    an.add_argument("--covariates", default=None,
                    help="comma-separated covariate columns (default: none)")
    an.add_argument("--all-covariates", action="store_true",
                    help="adjust for every column other than outcome and arm")
    an.add_argument("--categorical", default="", help="covariates to treat as factors")
    an.add_argument("--family", choices=("logit", "poisson"), default="logit")
    an.add_argument("--model", choices=("pooled", "stratified"), default="pooled")
    an.add_argument("--interactions", action="store_true")
    an.add_argument("--estimator", default="all",
                    help="comma-separated list, e.g. gc-mle,gob-fc-c0 (default: all)")
    an.add_argument("--variance", default="if,adjusted", help="comma-separated: if, adjusted, theoretical")
    an.add_argument("--test", default="wald,score", help="wald, score or both")
    an.add_argument("--contrast", choices=tuple(_CONTRASTS), default="diff")
    an.add_argument("--log-scale", action="store_true",
                    help="ratio / odds-ratio inference on the log scale")
    an.add_argument("--control", default=None, help="arm label of the reference arm")
    an.add_argument("--treatment", default=None, help="arm label of the compared arm")
    an.add_argument("--null", type=float, default=0.0)
    an.add_argument("--level", type=float, default=0.95)
    an.add_argument("--two-sided", action="store_true")
    an.add_argument("--out", default=None, help="report path (.json or .csv); stdout if omitted")
    an.add_argument("--format", choices=("json", "csv"), default=None)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo experiment")
    src = sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=("experiment-1", "experiment-2"))
    src.add_argument("--config", help="key=value or JSON config file")
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None, help="env: TRIAL_ADJUST_SEED")
    sim.add_argument("--threads", type=int, default=None, help="env: TRIAL_ADJUST_THREADS")
    sim.add_argument("--top-fraction", type=float, default=0.10)
    sim.add_argument("--records", action="store_true", help="also write replicate-level CSV")
    sim.add_argument("--out", required=True, help="output directory")
    return parser


def _env_int(name):
    val = os.environ.get(name)
    if val is None or not val.strip():
        return None
    try:
        return int(val)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got {val!r}") from None


def cmd_analyze(args) -> int:
    if args.all_covariates and args.covariates:
        raise UsageError("use either --covariates or --all-covariates")
    covs = None if args.all_covariates else _split(args.covariates or "")
    bindings = Bindings(outcome=args.outcome, arm=args.arm, covariates=covs,
                        categorical=_split(args.categorical))
    data = read_trial_csv(args.data, bindings, family=args.family)
    labels = list(data.arm_labels)
    arms = (1, 2)
    if args.control is not None or args.treatment is not None:
        try:
            a = labels.index(args.control) + 1 if args.control is not None else 1
            b = labels.index(args.treatment) + 1 if args.treatment is not None else (
                2 if a != 2 else 1)
        except ValueError:
            raise UsageError(f"unknown arm label; available: {labels}") from None
        arms = (a, b)
    req = AnalysisRequest(
        family=args.family, model=args.model, estimators=_estimators(args.estimator),
        variances=_split(args.variance), tests=_split(args.test),
        contrast=_CONTRASTS[args.contrast], log_scale=args.log_scale, arms=arms,
        null=args.null, level=args.level, two_sided=args.two_sided,
        interactions=args.interactions,
    )
    for v in req.variances:
        if v not in VARIANCE_MODES:
            raise UsageError(f"unknown variance mode {v!r}")
    for t in req.tests:
        if t not in ("wald", "score"):
            raise UsageError(f"unknown test {t!r}")
    report = analyze_trial(data, req)
    if args.out:
        write_report(report, args.out, args.format)
    elif args.format == "csv":
        sys.stdout.write(report_to_csv(report))
    else:
        sys.stdout.write(report_to_json(report))
    return EXIT_OK


def _percent_rows(rows):
    out = []
    for r in rows:
        r = dict(r)
        for key in _SIM_PERCENT:
            if isinstance(r.get(key), float):
                r[key] = 100.0 * r[key]
        out.append(r)
    return out


def cmd_simulate(args) -> int:
    from .config import load_config
    from .simulation import preset, run_experiment, summarize_experiment

    cfg = preset(args.preset) if args.preset else load_config(args.config)
    overrides = {}
    seed = args.seed if args.seed is not None else _env_int("TRIAL_ADJUST_SEED")
    threads = args.threads if args.threads is not None else _env_int("TRIAL_ADJUST_THREADS")
    if seed is not None:
        overrides["seed"] = seed
    if threads is not None:
        overrides["threads"] = threads
    if args.reps is not None:
        overrides["reps"] = args.reps
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)

    log.info("running %s: %d replicates", cfg.name, cfg.reps)
    records = run_experiment(cfg)
    summary = summarize_experiment(records, cfg, top_fraction=args.top_fraction)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = summary.to_dict()
    doc["config"]["threads"] = None  # scheduling does not affect results
    (out / "summary.json").write_text(report_to_json(doc), encoding="utf-8")
    rows_to_csv(_percent_rows(summary.rows), out / "summary.csv")
    rows_to_csv(_percent_rows(summary.separation_rows), out / "separation.csv")
    if args.records:
        rows_to_csv(_record_rows(records, cfg), out / "replicates.csv")
    return EXIT_OK


def _record_rows(records, cfg):
    rows = []
    kinds = cfg.estimator_kinds
    for rec in records:
        for ci, c in enumerate(cfg.adjusted_counts):
            for ki, kind in enumerate(kinds):
                row = {"rep": rec.rep, "count": c, "estimator": kind.value,
                       "delta": float(rec.delta[ci, ki]),
                       "mu1": float(rec.mu[ci, ki, 0]), "mu2": float(rec.mu[ci, ki, 1])}
                for vi, mode in enumerate(cfg.variance_modes):
                    row[f"var_{mode}"] = float(rec.var[ci, ki, vi])
                row.update(max_abs_beta=float(rec.max_abs_beta[ci]),
                           separated=bool(rec.separated[ci]),
                           unadj_delta=rec.unadj_delta, unadj_var=rec.unadj_var)
                rows.append(row)
    return rows


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"trial-adjust: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handler = cmd_analyze if args.command == "analyze" else cmd_simulate
    try:
        return handler(args)
    except (UsageError, TrialAdjustError, FileNotFoundError, IsADirectoryError,
            PermissionError, ValueError, json.JSONDecodeError) as exc:
        print(f"trial-adjust: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"trial-adjust: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
