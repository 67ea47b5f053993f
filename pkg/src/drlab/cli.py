"""Command-line front end: simulate, rate-sweep, estimate, report.

Config files are INI-style text (parsed with configparser): a ``[run]``
section for global keys, an optional ``[dgp]`` section with default DGP
parameters, and one ``[scenario:<id>]`` section per scenario. Example::

    [run]
    base_seed = 20260809
    ci_level = 0.95

    [dgp]
    gamma = 0 0.5
    beta = 1 2
    tau = 2
    sigma = 1

    [scenario:oracle8000]
    moment = aipw
    nuisance = oracle
    n_grid = 8000
    reps = 2000
    probe_taylor = false

Scenario sections may override any dgp key. ``simulate`` writes one
``records_<scenario>.csv`` per scenario plus ``summary.json`` and
``manifest.json``; numeric CSV fields use shortest round-trip (up to 17
significant digit) rendering so re-analysis is lossless.

Exit codes: 0 success, 2 config or input error, 3 scenario abort (failure
budget exceeded), 4 estimation failure on user data.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._linalg import SingularMatrixError
from .data import Dataset
from .dgp import DGPSpec
from .moments import MOMENT_IDS, PositivityError, make_moment
from .nuisance import SeparationError, apply_strategy, parse_strategy
from .sandwich import sandwich_variance
from .simlab import (
    ReplicationRecord,
    ScenarioAbortError,
    ScenarioConfig,
    SimSummary,
    SummaryRow,
    rate_sweep,
    run_scenario,
    summarize,
)
from .zsolver import SolveSettings, solve

RECORD_COLUMNS = (
    "scenario_id", "n", "rep", "psi_hat", "se", "ci_lo", "ci_hi",
    "covered", "theta_err", "taylor_term", "converged",
)

WORKERS_ENV = "DRLAB_WORKERS"


class ConfigError(ValueError):
    """A config file or CLI input is invalid; the message names the culprit."""


@dataclass(frozen=True)
class RunConfig:
    base_seed: int
    ci_level: float
    scenarios: tuple[ScenarioConfig, ...]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_DGP_KEYS = ("gamma", "beta", "tau", "sigma")


def _dgp_from(section: configparser.SectionProxy, defaults: dict, where: str) -> DGPSpec:
    kwargs = dict(defaults)
    for key in _DGP_KEYS:
        if key in section:
            try:
                if key in ("gamma", "beta"):
                    kwargs[key] = _floats(section[key])
                else:
                    kwargs[key] = float(section[key])
            except ValueError as exc:
                raise ConfigError(f"{where} {key}: {exc}") from exc
    try:
        return DGPSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(path: str | Path) -> RunConfig:
    """Parse and validate a scenario config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    base_seed, ci_level = 0, 0.95
    if parser.has_section("run"):
        run = parser["run"]
        for key in run:
            if key not in ("base_seed", "ci_level"):
                raise ConfigError(f"[run] has unknown key {key!r}")
        try:
            base_seed = run.getint("base_seed", base_seed)
            ci_level = run.getfloat("ci_level", ci_level)
        except ValueError as exc:
            raise ConfigError(f"[run]: {exc}") from exc
    if not (0.0 < ci_level < 1.0):
        raise ConfigError(f"[run] ci_level must lie in (0, 1), got {ci_level}")

    dgp_defaults: dict = {}
    if parser.has_section("dgp"):
        for key in parser["dgp"]:
            if key not in _DGP_KEYS:
                raise ConfigError(f"[dgp] has unknown key {key!r}")
        spec = _dgp_from(parser["dgp"], {}, "[dgp]")
        dgp_defaults = {"gamma": spec.gamma, "beta": spec.beta,
                        "tau": spec.tau, "sigma": spec.sigma}

    scenarios = []
    for name in parser.sections():
        if name in ("run", "dgp"):
            continue
        if not name.startswith("scenario:"):
            raise ConfigError(f"unknown section [{name}]; expected [scenario:<id>]")
        sid = name.split(":", 1)[1].strip()
        section = parser[name]
        where = f"[{name}]"
        for key in section:
            if key not in ("moment", "nuisance", "n_grid", "reps", "probe_taylor") + _DGP_KEYS:
                raise ConfigError(f"{where} has unknown key {key!r}")
        for key in ("moment", "nuisance", "n_grid", "reps"):
            if key not in section:
                raise ConfigError(f"{where} is missing required key {key!r}")
        try:
            scenario = ScenarioConfig(
                scenario_id=sid,
                dgp=_dgp_from(section, dgp_defaults, where),
                moment=section["moment"].strip(),
                nuisance=section["nuisance"].strip(),
                n_grid=_ints(section["n_grid"]),
                reps=int(section["reps"]),
                ci_level=ci_level,
                base_seed=base_seed,
                probe_taylor=_bool(section.get("probe_taylor", "false")),
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        scenarios.append(scenario)

    if not scenarios:
        raise ConfigError(f"{path} defines no [scenario:<id>] sections")
    ids = [s.scenario_id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate scenario ids in config")
    return RunConfig(base_seed=base_seed, ci_level=ci_level, scenarios=tuple(scenarios))


def config_hash(config: RunConfig) -> str:
    """SHA-256 over the canonical semantic content of a parsed config."""
    canon = {
        "base_seed": config.base_seed,
        "ci_level": config.ci_level,
        "scenarios": sorted(
            (
                {
                    "scenario_id": s.scenario_id,
                    "dgp": {"gamma": s.dgp.gamma, "beta": s.dgp.beta,
                            "tau": s.dgp.tau, "sigma": s.dgp.sigma},
                    "moment": s.moment,
                    "nuisance": s.nuisance,
                    "n_grid": s.n_grid,
                    "reps": s.reps,
                    "probe_taylor": s.probe_taylor,
                }
                for s in config.scenarios
            ),
            key=lambda d: d["scenario_id"],
        ),
    }
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _fmt(value: float) -> str:
    return repr(float(value))


def records_filename(scenario_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "-", scenario_id)
    return f"records_{safe}.csv"


def write_records_csv(path: str | Path, records: list[ReplicationRecord]) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([
                r.scenario_id, r.n, r.rep,
                _fmt(r.psi_hat), _fmt(r.se), _fmt(r.ci_lower), _fmt(r.ci_upper),
                int(r.covered), _fmt(r.theta_err),
                "" if r.taylor_term is None else _fmt(r.taylor_term),
                int(r.converged),
            ])


def read_records_csv(path: str | Path) -> list[ReplicationRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RECORD_COLUMNS:
            raise ConfigError(f"{path}: unexpected records header {header}")
        for row in reader:
            records.append(ReplicationRecord(
                scenario_id=row[0], n=int(row[1]), rep=int(row[2]),
                psi_hat=float(row[3]), se=float(row[4]),
                ci_lower=float(row[5]), ci_upper=float(row[6]),
                covered=bool(int(row[7])), theta_err=float(row[8]),
                taylor_term=None if row[9] == "" else float(row[9]),
                converged=bool(int(row[10])),
            ))
    return records


def _row_dict(row: SummaryRow) -> dict:
    return {
        "n": row.n, "reps": row.reps, "failures": row.failures,
        "mean_bias": row.mean_bias, "sd_psi": row.sd_psi, "mean_se": row.mean_se,
        "se_sd_ratio": row.se_sd_ratio, "coverage": row.coverage,
        "coverage_se": row.coverage_se, "sqrt_n_abs_bias": row.sqrt_n_abs_bias,
        "taylor_median": row.taylor_median, "taylor_q90": row.taylor_q90,
        "nuisance_rmse": row.nuisance_rmse,
    }


def summary_to_dict(summary: SimSummary) -> dict:
    return {
        "scenario_id": summary.scenario_id,
        "moment": summary.moment,
        "nuisance": summary.nuisance,
        "ci_level": summary.ci_level,
        "psi_star": summary.psi_star,
        "rows": [_row_dict(r) for r in summary.rows],
    }


def _summary_from_dict(blob: dict) -> SimSummary:
    rows = tuple(
        SummaryRow(**{key: row[key] for key in _row_dict(SummaryRow(
            n=1, reps=1, failures=0, mean_bias=0.0, sd_psi=0.0, mean_se=0.0,
            se_sd_ratio=0.0, coverage=0.0, coverage_se=0.0, sqrt_n_abs_bias=0.0,
            taylor_median=None, taylor_q90=None, nuisance_rmse=0.0,
        ))})
        for row in blob["rows"]
    )
    return SimSummary(
        scenario_id=blob["scenario_id"], moment=blob["moment"],
        nuisance=blob["nuisance"], ci_level=blob["ci_level"],
        psi_star=blob["psi_star"], rows=rows,
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def resolve_workers(cli_value: int | None) -> int:
    if cli_value is not None:
        return max(1, cli_value)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def _write_outputs(
    out_dir: Path,
    config: RunConfig,
    results: list[tuple[ScenarioConfig, list[ReplicationRecord], SimSummary]],
    started: str,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for scenario, records, _ in results:
        fname = records_filename(scenario.scenario_id)
        write_records_csv(out_dir / fname, records)
        outputs[scenario.scenario_id] = fname
    summary_blob = {
        "artifact_version": __version__,
        "config_hash": config_hash(config),
        "base_seed": config.base_seed,
        "ci_level": config.ci_level,
        "scenarios": [summary_to_dict(summary) for _, _, summary in results],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary_blob, indent=2) + "\n")
    manifest = {
        "artifact_version": __version__,
        "config_hash": summary_blob["config_hash"],
        "base_seed": config.base_seed,
        "started_at": started,
        "finished_at": _now(),
        "outputs": {**outputs, "summary": "summary.json"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_simulate(config_path: str, out_dir: str, workers: int | None = None) -> int:
    """Run every scenario in a config and persist records + summaries."""
    try:
        config = parse_config(config_path)
        nworkers = resolve_workers(workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    started = _now()
    results = []
    for scenario in config.scenarios:
        print(f"scenario {scenario.scenario_id}: moment={scenario.moment} "
              f"nuisance={scenario.nuisance} n_grid={scenario.n_grid} "
              f"reps={scenario.reps}", file=sys.stderr)
        try:
            records, summary = run_scenario(scenario, workers=nworkers)
        except ScenarioAbortError as exc:
            print(f"scenario abort: {exc}", file=sys.stderr)
            return 3
        results.append((scenario, records, summary))
    _write_outputs(Path(out_dir), config, results, started)
    return 0


def cmd_rate_sweep(
    config_path: str,
    alphas: list[float],
    out_dir: str,
    workers: int | None = None,
) -> int:
    """Re-run each configured scenario across a grid of degradation rates."""
    try:
        config = parse_config(config_path)
        nworkers = resolve_workers(workers)
        if not alphas:
            raise ConfigError("at least one alpha is required")
        for alpha in alphas:
            if not (0.0 < alpha <= 0.5):
                raise ConfigError(f"alpha ∈ (0, 0.5] required, got {alpha:g}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    started = _now()
    results = []
    for scenario in config.scenarios:
        print(f"rate sweep {scenario.scenario_id}: alphas={alphas}", file=sys.stderr)
        try:
            swept = rate_sweep(scenario, alphas, workers=nworkers)
        except ScenarioAbortError as exc:
            print(f"scenario abort: {exc}", file=sys.stderr)
            return 3
        for alpha in alphas:
            records, summary = swept[alpha]
            variant = ScenarioConfig(
                scenario_id=summary.scenario_id, dgp=scenario.dgp,
                moment=scenario.moment, nuisance=summary.nuisance,
                n_grid=scenario.n_grid, reps=scenario.reps,
                ci_level=scenario.ci_level, base_seed=scenario.base_seed,
                probe_taylor=scenario.probe_taylor,
            )
            results.append((variant, records, summary))
    _write_outputs(Path(out_dir), config, results, started)
    return 0


def read_data_csv(path: str | Path) -> Dataset:
    """Read an estimation dataset: header with optional x* columns, a, y.

    Covariate columns (names starting with "x") are taken in file order and
    an intercept column of ones is prepended.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        xcols, acol, ycol = [], None, None
        for idx, name in enumerate(header):
            if name == "a":
                acol = idx
            elif name == "y":
                ycol = idx
            elif name.startswith("x"):
                xcols.append(idx)
            else:
                raise ConfigError(f"{path}: unexpected column {name!r} (want x*, a, y)")
        if acol is None or ycol is None:
            raise ConfigError(f"{path}: header must contain columns 'a' and 'y'")
        xs, aa, yy = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ConfigError(f"{path}: row {rownum} has {len(row)} fields, "
                                  f"expected {len(header)}")
            try:
                xs.append([float(row[i]) for i in xcols])
                aval = float(row[acol])
                yy.append(float(row[ycol]))
            except ValueError:
                raise ConfigError(f"{path}: row {rownum} has a non-numeric field") from None
            if aval not in (0.0, 1.0):
                raise ConfigError(f"{path}: row {rownum}: a must be 0 or 1, got {row[acol]!r}")
            aa.append(aval)
    if not aa:
        raise ConfigError(f"{path}: no data rows")
    n = len(aa)
    x = np.column_stack([np.ones(n)] + [np.array(col) for col in zip(*xs)]) \
        if xs and xs[0] else np.ones((n, 1))
    try:
        return Dataset(x=x, a=np.array(aa), y=np.array(yy))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_data_csv(path: str | Path, data: Dataset) -> None:
    """Write a dataset in the estimate-command schema (x1..xq, a, y)."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(1, data.p)] + ["a", "y"])
        for i in range(data.n):
            writer.writerow(
                [_fmt(v) for v in data.x[i, 1:]] + [int(data.a[i]), _fmt(data.y[i])]
            )


def cmd_estimate(
    data_csv: str,
    moment_id: str,
    nuisance: str,
    ci_level: float = 0.95,
) -> int:
    """Estimate psi on a user-supplied CSV and print one JSON object."""
    try:
        data = read_data_csv(data_csv)
        if moment_id not in MOMENT_IDS:
            raise ConfigError(f"unknown moment {moment_id!r}; expected one of {MOMENT_IDS}")
        moment = make_moment(moment_id, data.p)
        try:
            strategy = parse_strategy(nuisance)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if strategy.needs_truth:
            raise ConfigError(
                f"strategy {strategy.kind!r} needs the true nuisance values, which are "
                "only known for simulated scenarios; use mle, misspecified or fixed"
            )
        if not (0.0 < ci_level < 1.0):
            raise ConfigError(f"ci level must lie in (0, 1), got {ci_level}")
    except ConfigError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    try:
        fit = apply_strategy(strategy, moment, data, None)
        report = solve(moment, fit, data, SolveSettings())
        if not report.converged:
            print(f"solver did not converge (residual {report.residual_norm:.3e})",
                  file=sys.stderr)
            return 4
        sw = sandwich_variance(moment, report.psi_hat, fit, data, ci_level)
    except (PositivityError, SeparationError, SingularMatrixError, ValueError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return 4
    print(json.dumps({
        "psi_hat": float(report.psi_hat[0]),
        "se": float(sw.se[0]),
        "ci_lower": float(sw.ci_lower[0]),
        "ci_upper": float(sw.ci_upper[0]),
        "ci_level": ci_level,
        "n": data.n,
        "moment": moment_id,
        "nuisance": nuisance,
        "iterations": report.iterations,
        "residual_norm": report.residual_norm,
    }))
    return 0


_REPORT_METRICS = (
    "mean_bias", "sd_psi", "mean_se", "se_sd_ratio", "coverage", "coverage_se",
    "sqrt_n_abs_bias", "taylor_median", "taylor_q90", "nuisance_rmse", "failures",
)


def cmd_report(in_dir: str) -> int:
    """Render a plain-text table and a plot-ready long CSV from a run directory.

    When per-scenario records CSVs are present they are re-aggregated, so the
    report doubles as a round-trip check of the persisted records.
    """
    out = Path(in_dir)
    summary_path = out / "summary.json"
    if not summary_path.is_file():
        print(f"input error: {summary_path} not found", file=sys.stderr)
        return 2
    blob = json.loads(summary_path.read_text())
    summaries = []
    for sc in blob["scenarios"]:
        stored = _summary_from_dict(sc)
        records_path = out / records_filename(stored.scenario_id)
        if records_path.is_file():
            records = read_records_csv(records_path)
            summaries.append(summarize(
                records,
                scenario_id=stored.scenario_id, moment=stored.moment,
                nuisance=stored.nuisance, ci_level=stored.ci_level,
                psi_star=stored.psi_star,
            ))
        else:
            summaries.append(stored)

    widths = (24, 7, 6, 5, 10, 9, 9, 7, 9, 8, 10, 11, 11, 10)
    headers = ("scenario", "n", "reps", "fail", "bias", "sd", "mean_se", "se/sd",
               "coverage", "cov_se", "rtn_bias", "taylor_med", "taylor_q90", "theta_rmse")
    lines = [" ".join(h.rjust(w) for h, w in zip(headers, widths))]
    for summary in summaries:
        for row in summary.rows:
            cells = (
                summary.scenario_id, str(row.n), str(row.reps), str(row.failures),
                f"{row.mean_bias:.5f}", f"{row.sd_psi:.5f}", f"{row.mean_se:.5f}",
                f"{row.se_sd_ratio:.4f}", f"{row.coverage:.4f}", f"{row.coverage_se:.4f}",
                f"{row.sqrt_n_abs_bias:.4f}",
                "-" if row.taylor_median is None else f"{row.taylor_median:.5f}",
                "-" if row.taylor_q90 is None else f"{row.taylor_q90:.5f}",
                f"{row.nuisance_rmse:.5f}",
            )
            lines.append(" ".join(c.rjust(w) for c, w in zip(cells, widths)))
    (out / "report.txt").write_text("\n".join(lines) + "\n")

    with open(out / "report_long.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scenario_id", "n", "metric", "value"])
        for summary in summaries:
            for row in summary.rows:
                values = _row_dict(row)
                for metric in _REPORT_METRICS:
                    value = values[metric]
                    writer.writerow([
                        summary.scenario_id, row.n, metric,
                        "" if value is None else _fmt(value),
                    ])
    print("\n".join(lines))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="drlab",
        description="Z-estimation with plug-in nuisances: simulation lab and estimator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the scenarios of a config file")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--workers", type=int, default=None,
                       help=f"parallel workers (default ${WORKERS_ENV} or 1)")

    p_sweep = sub.add_parser("rate-sweep", help="sweep the nuisance degradation rate")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--alphas", required=True,
                         help="comma-separated rate exponents, each in (0, 0.5]")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--workers", type=int, default=None)

    p_est = sub.add_parser("estimate", help="estimate psi from a CSV file")
    p_est.add_argument("--data", required=True)
    p_est.add_argument("--moment", required=True, choices=sorted(MOMENT_IDS))
    p_est.add_argument("--nuisance", required=True)
    p_est.add_argument("--ci", type=float, default=0.95)

    p_rep = sub.add_parser("report", help="summarize a simulate/rate-sweep output directory")
    p_rep.add_argument("--in", dest="in_dir", required=True)

    args = parser.parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out, args.workers)
    if args.command == "rate-sweep":
        try:
            alphas = [float(v) for v in args.alphas.split(",") if v.strip()]
        except ValueError:
            print(f"config error: --alphas must be comma-separated floats, "
                  f"got {args.alphas!r}", file=sys.stderr)
            return 2
        return cmd_rate_sweep(args.config, alphas, args.out, args.workers)
    if args.command == "estimate":
        return cmd_estimate(args.data, args.moment, args.nuisance, args.ci)
    if args.command == "report":
        return cmd_report(args.in_dir)
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
