# modules/cli.py
"""
Command-line surface.

    drmatch.py estimate  --input data.csv [--estimator drme ...] [--estimand att]
    drmatch.py balance   --input data.csv [--svg balance.svg]
    drmatch.py simulate  --scenario linear31 --n 200 --p 1000 --reps 1000 --seed 7
    drmatch.py coverage  --n-values 200,500 --p-values 200,500 --reps 500
    drmatch.py grid      --which treatment --n-values 500,2000 --p-values 100 --reps 200

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from modules import __version__, diagnostics, reports, simulation
from modules.config import (
    DEFAULT_CALIPER_SD,
    DEFAULT_M,
    DEFAULT_N_FOLDS,
    CvConfig,
    EstimationConfig,
    configure_logging,
    default_n_jobs,
)
from modules.errors import DataError, DrmatchError, UsageError
from modules.estimators import (
    ESTIMATOR_LABELS,
    ESTIMATORS,
    MATCHING_ESTIMATORS,
    NuisanceCache,
    estimate_all,
)
from modules.matching import build_matches
from modules.scores import BOTH, Dataset, load_score_models, save_score_models

logger = logging.getLogger(__name__)

COMMANDS = ("estimate", "simulate", "coverage", "grid", "balance")
_MAX_LISTED_ROWS = 20


# -------------------------
# Run configuration
# -------------------------
@dataclass(frozen=True)
class RunConfig:
    command: str
    input_path: Optional[str] = None
    outcome_col: str = "y"
    treatment_col: str = "w"
    covariate_cols: Optional[Tuple[str, ...]] = None  # None -> all remaining columns
    estimators: Tuple[str, ...] = ("drme",)
    m: int = DEFAULT_M
    caliper_sd: Optional[float] = DEFAULT_CALIPER_SD
    estimand: str = "ATE"
    seed: int = 0
    n_reps: int = 1000
    n: Optional[int] = None
    p: Optional[int] = None
    sigma2: Optional[float] = None
    scenario: str = "linear31"
    n_values: Tuple[int, ...] = ()
    p_values: Tuple[int, ...] = ()
    form: str = simulation.LINEAR
    which: str = "both"
    output_path: Optional[str] = None
    output_format: str = "json"
    emit_svg: bool = False
    svg_path: Optional[str] = None
    n_jobs: int = 1
    n_folds: int = DEFAULT_N_FOLDS
    lambda_rule: str = "min"
    score_scale: str = "response"
    ipw_normalization: str = "hajek"
    trim: Optional[float] = None
    aipw_outcome: str = "additive"
    standardize_columns: bool = True
    keep_estimates: bool = False
    save_models: Optional[str] = None
    load_models: Optional[str] = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.command in ("estimate", "balance") and not self.input_path:
            raise UsageError(f"{self.command} needs --input")
        if self.command in ("coverage", "grid") and (not self.n_values or not self.p_values):
            raise UsageError(f"{self.command} needs --n-values and --p-values")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_LABELS]
        if unknown:
            raise UsageError(f"unknown estimator(s): {', '.join(unknown)}; choose from {', '.join(ESTIMATORS)}")
        if self.output_format not in ("csv", "json"):
            raise UsageError("output format must be csv or json")
        if self.n_reps < 2:
            raise UsageError("--reps must be at least 2")

    def estimation_config(self) -> EstimationConfig:
        try:
            return EstimationConfig(
                m=self.m,
                caliper_sd=self.caliper_sd,
                estimand=self.estimand,
                standardize_columns=self.standardize_columns,
                score_scale=self.score_scale,
                ipw_normalization=self.ipw_normalization,
                trim=self.trim,
                aipw_outcome=self.aipw_outcome,
                # simulations parallelize over replications instead
                cv=CvConfig(
                    n_folds=self.n_folds, rule=self.lambda_rule,
                    n_jobs=self.n_jobs if self.command in ("estimate", "balance") else 1,
                ),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("extra")
        return out


# -------------------------
# Input
# -------------------------
def _row_list(rows: np.ndarray) -> str:
    listed = ", ".join(str(r) for r in rows[:_MAX_LISTED_ROWS])
    if rows.size > _MAX_LISTED_ROWS:
        listed += f", ... ({rows.size} rows)"
    return listed


def parse_input(path, config: RunConfig, min_per_arm: int = 2) -> Dataset:
    """
    Read a UTF-8 CSV with a header row into a Dataset. Row numbers in error
    messages count data rows from 1 (the header is not counted).
    """
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no data rows") from None
    except (UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise DataError(f"{path}: unreadable CSV ({exc})") from None
    if frame.empty:
        raise DataError(f"{path}: no data rows")

    covariates = list(config.covariate_cols) if config.covariate_cols else [
        c for c in frame.columns if c not in (config.outcome_col, config.treatment_col)
    ]
    needed = [config.outcome_col, config.treatment_col, *covariates]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if not covariates:
        raise DataError("no covariate columns")

    treatment = pd.to_numeric(frame[config.treatment_col], errors="coerce")
    non_binary = np.flatnonzero(~treatment.isin([0, 1]).to_numpy())
    if non_binary.size:
        first = frame[config.treatment_col].iloc[non_binary[0]]
        raise DataError(
            f"non-binary treatment in column {config.treatment_col!r} at row(s) {_row_list(non_binary + 1)} "
            f"(first bad value {first!r})"
        )

    numeric = frame[[config.outcome_col, *covariates]].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(numeric).all(axis=1))
    if bad.size:
        raise DataError(f"non-finite or non-numeric values at row(s) {_row_list(bad + 1)}")

    w = treatment.to_numpy(dtype=int)
    n_treated = int(w.sum())
    n_control = int(w.size - n_treated)
    if min(n_treated, n_control) < min_per_arm:
        raise DataError(
            f"each treatment arm needs at least {min_per_arm} rows (treated={n_treated}, control={n_control})"
        )
    logger.info("read %s: %d rows (%d treated), %d covariates", path, w.size, n_treated, len(covariates))
    return Dataset.from_arrays(
        numeric[:, 0], w, numeric[:, 1:], covariates,
        outcome_name=config.outcome_col, treatment_name=config.treatment_col,
    )


# -------------------------
# Commands
# -------------------------
def _emit(config: RunConfig, payload: dict, frame: Optional[pd.DataFrame], index: bool = True) -> None:
    prov = reports.provenance(config.command, config.to_dict(), config.seed)
    if config.output_format == "csv" and frame is not None:
        if config.output_path:
            reports.write_csv(config.output_path, frame, prov, index)
        else:
            sys.stdout.write(reports.render_csv(frame, prov, index))
        return
    if config.output_path:
        reports.write_json(config.output_path, payload, prov)
    else:
        sys.stdout.write(reports.render_json(payload, prov))


def _emit_companion(config: RunConfig, suffix: str, frame: pd.DataFrame, index: bool = False) -> None:
    """Second table of a run, written next to the main output file."""
    if not config.output_path:
        return
    prov = reports.provenance(config.command, config.to_dict(), config.seed)
    reports.write_csv(reports.sibling(config.output_path, suffix, ".csv"), frame, prov, index)


def _svg_path(config: RunConfig) -> Optional[Path]:
    if config.svg_path:
        return Path(config.svg_path)
    if config.emit_svg:
        base = config.output_path or f"{config.command}.json"
        return reports.sibling(base, "balance", ".svg")
    return None


def _nuisances(config: RunConfig, dataset: Dataset) -> NuisanceCache:
    nuis = NuisanceCache(dataset, config.estimation_config(), config.seed)
    if config.load_models:
        nuis.use_score_models(load_score_models(config.load_models, dataset.covariate_names))
    return nuis


def _balance_reports(dataset: Dataset, nuis: NuisanceCache, names) -> dict:
    out = {}
    for name in names:
        result = build_matches(nuis.scores(MATCHING_ESTIMATORS[name]), dataset.w, nuis.match_spec)
        out[name] = diagnostics.balance_report(dataset, result)
    return out


def _balance_long(balance: dict) -> pd.DataFrame:
    frames = [report.frame.assign(estimator=name) for name, report in balance.items()]
    frame = pd.concat(frames, ignore_index=True)
    return frame[["estimator", "covariate", "asmd_before", "asmd_after"]]


def run_estimate(config: RunConfig) -> int:
    dataset = parse_input(config.input_path, config)
    nuis = _nuisances(config, dataset)
    estimates = estimate_all(dataset, config.estimators, nuis.config, config.seed, nuisances=nuis)
    matching = [name for name in config.estimators if name in MATCHING_ESTIMATORS]
    balance = _balance_reports(dataset, nuis, matching)
    if config.save_models:
        save_score_models(nuis.scores(BOTH), dataset.covariate_names, config.save_models)

    payload = {
        "estimates": [e.to_dict() for e in estimates.values()],
        "balance": {name: report.to_dict() for name, report in balance.items()},
    }
    table = pd.DataFrame([{k: v for k, v in e.to_dict().items() if k != "diagnostics"} for e in estimates.values()])
    _emit(config, payload, table, index=False)
    if balance:
        _emit_companion(config, "balance", _balance_long(balance))
    svg = _svg_path(config)
    if svg is not None and balance:
        diagnostics.plot_balance({ESTIMATOR_LABELS[n]: r for n, r in balance.items()}, svg)
    for e in estimates.values():
        logger.info("%s: tau=%.4f se=%.4f [%.4f, %.4f]", e.estimator_name, e.tau_hat, e.se, e.ci_lower, e.ci_upper)
    return 0


def run_balance(config: RunConfig) -> int:
    dataset = parse_input(config.input_path, config)
    nuis = _nuisances(config, dataset)
    balance = _balance_reports(dataset, nuis, ("psm", "drme"))
    labelled = {ESTIMATOR_LABELS[n]: r for n, r in balance.items()}
    table = diagnostics.summary_table(labelled)
    payload = {
        "summary": table.to_dict(orient="index"),
        "covariates": _balance_long(balance).to_dict(orient="records"),
    }
    _emit(config, payload, table)
    _emit_companion(config, "covariates", _balance_long(balance))
    svg = _svg_path(config)
    if svg is not None:
        diagnostics.plot_balance(labelled, svg)
    return 0


def run_simulate(config: RunConfig) -> int:
    spec = simulation.scenario(config.scenario, n=config.n, p=config.p, sigma2=config.sigma2, seed=config.seed)
    names = config.estimators if config.extra.get("estimators_given") else ESTIMATORS
    summary = simulation.run_study(
        spec, names, config.n_reps, config.n_jobs, config.estimation_config(), config.keep_estimates
    )
    _emit(config, summary.to_dict(), summary.table)
    if summary.estimates is not None:
        _emit_companion(config, "replications", summary.estimates, index=True)
    return 0


def run_coverage(config: RunConfig) -> int:
    grid = simulation.coverage_grid(
        config.n_values, config.p_values, config.n_reps, config.seed, form=config.form,
        sigma2=config.sigma2 or 1.0, config=config.estimation_config(), parallelism=config.n_jobs,
    )
    _emit(config, {"form": config.form, "coverage": grid.to_dict(orient="index")}, grid)
    return 0


def run_grid(config: RunConfig) -> int:
    names = config.estimators if config.extra.get("estimators_given") else simulation.DOUBLY_ROBUST
    grid = simulation.misspecification_grid(
        config.which, config.n_values, config.p_values, config.n_reps, config.seed, names,
        sigma2=config.sigma2 or 1.0, config=config.estimation_config(), parallelism=config.n_jobs,
    )
    rate = simulation.rate_curve(grid) if "drme" in names else None
    payload = {"grid": grid.to_dict(orient="records")}
    if rate is not None:
        payload["rate_curve"] = rate.to_dict(orient="records")
    _emit(config, payload, grid, index=False)
    if rate is not None:
        _emit_companion(config, "rate", rate)
    return 0


_RUNNERS = {
    "estimate": run_estimate,
    "balance": run_balance,
    "simulate": run_simulate,
    "coverage": run_coverage,
    "grid": run_grid,
}


def run(config: RunConfig) -> int:
    return _RUNNERS[config.command](config)


# -------------------------
# Argument parsing
# -------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _caliper(text: str) -> Optional[float]:
    if text.lower() in ("none", "off"):
        return None
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drmatch", description="Doubly robust matching for treatment-effect estimation.")
    parser.add_argument("--version", action="version", version=f"drmatch {__version__}")

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=None, help="parallel workers (default: DRMATCH_N_JOBS or 1)")
    common.add_argument("--output", "-o", default=None)
    common.add_argument("--format", choices=("csv", "json"), default=None)
    common.add_argument("--folds", type=int, default=DEFAULT_N_FOLDS)
    common.add_argument("--lambda-rule", choices=("min", "1se"), default="min")
    common.add_argument("--verbose", "-v", action="store_true")

    matching = _Parser(add_help=False)
    matching.add_argument("--m", type=int, default=DEFAULT_M, help="matches per unit")
    matching.add_argument("--caliper", type=_caliper, default=DEFAULT_CALIPER_SD, help="caliper in sd units, or 'none'")
    matching.add_argument("--estimand", type=str.upper, choices=("ATE", "ATT"), default="ATE")
    matching.add_argument("--score-scale", choices=("response", "linear"), default="response")
    matching.add_argument("--no-standardize", action="store_true")
    matching.add_argument("--ipw", choices=("hajek", "horvitz_thompson"), default="hajek")
    matching.add_argument("--trim", type=float, default=None)
    matching.add_argument("--aipw-outcome", choices=("additive", "per_arm"), default="additive")
    matching.add_argument("--estimator", action="append", default=None, choices=ESTIMATORS)

    data = _Parser(add_help=False)
    data.add_argument("--input", required=True)
    data.add_argument("--outcome", default="y")
    data.add_argument("--treatment", default="w")
    data.add_argument("--covariates", default=None, help="comma-separated; default all remaining columns")
    data.add_argument("--save-models", default=None)
    data.add_argument("--load-models", default=None)
    data.add_argument("--svg", default=None)

    sims = _Parser(add_help=False)
    sims.add_argument("--reps", type=int, default=1000)
    sims.add_argument("--sigma2", type=float, default=None)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("estimate", parents=[common, matching, data], help="estimate effects on a CSV dataset")
    sub.add_parser("balance", parents=[common, matching, data], help="covariate balance before/after matching")
    sim = sub.add_parser("simulate", parents=[common, matching, sims], help="Monte Carlo study of one scenario")
    sim.add_argument("--scenario", choices=tuple(simulation.PRESETS), default="linear31")
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--p", type=int, default=None)
    sim.add_argument("--keep-estimates", action="store_true")
    cov = sub.add_parser("coverage", parents=[common, matching, sims], help="DRME interval coverage over (N, P)")
    cov.add_argument("--n-values", type=_int_list, required=True)
    cov.add_argument("--p-values", type=_int_list, required=True)
    cov.add_argument("--form", choices=("linear", "nonlinear"), default="linear")
    grid = sub.add_parser("grid", parents=[common, matching, sims], help="misspecification grid over (N, P)")
    grid.add_argument("--which", choices=("treatment", "outcome", "both"), default="both")
    grid.add_argument("--n-values", type=_int_list, required=True)
    grid.add_argument("--p-values", type=_int_list, required=True)
    return parser


def _output_format(args) -> str:
    if args.format:
        return args.format
    if args.output and Path(args.output).suffix.lower() == ".csv":
        return "csv"
    return "json"


def config_from_args(args: argparse.Namespace) -> RunConfig:
    given = getattr(args, "estimator", None)
    covariates = getattr(args, "covariates", None)
    form = getattr(args, "form", "linear")
    return RunConfig(
        command=args.command,
        input_path=getattr(args, "input", None),
        outcome_col=getattr(args, "outcome", "y"),
        treatment_col=getattr(args, "treatment", "w"),
        covariate_cols=tuple(c.strip() for c in covariates.split(",") if c.strip()) if covariates else None,
        estimators=tuple(dict.fromkeys(given)) if given else ("drme",),
        m=args.m,
        caliper_sd=args.caliper,
        estimand=args.estimand,
        seed=args.seed,
        n_reps=getattr(args, "reps", 1000),
        n=getattr(args, "n", None),
        p=getattr(args, "p", None),
        sigma2=getattr(args, "sigma2", None),
        scenario=getattr(args, "scenario", "linear31"),
        n_values=tuple(getattr(args, "n_values", ()) or ()),
        p_values=tuple(getattr(args, "p_values", ()) or ()),
        form=simulation.NONLINEAR if form == "nonlinear" else simulation.LINEAR,
        which=getattr(args, "which", "both"),
        output_path=args.output,
        output_format=_output_format(args),
        emit_svg=getattr(args, "svg", None) is not None,
        svg_path=getattr(args, "svg", None),
        n_jobs=args.jobs if args.jobs is not None else default_n_jobs(),
        n_folds=args.folds,
        lambda_rule=args.lambda_rule,
        score_scale=args.score_scale,
        ipw_normalization=args.ipw,
        trim=args.trim,
        aipw_outcome=args.aipw_outcome,
        standardize_columns=not args.no_standardize,
        keep_estimates=getattr(args, "keep_estimates", False),
        save_models=getattr(args, "save_models", None),
        load_models=getattr(args, "load_models", None),
        extra={"estimators_given": bool(given)},
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    configured = False
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose)
        configured = True
        return run(config_from_args(args))
    except DrmatchError as exc:
        if not configured:
            configure_logging(False)
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        if not configured:
            configure_logging(False)
        logger.error("I/O error: %s", exc)
        return DataError.exit_code
