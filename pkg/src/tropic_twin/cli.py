"""Command-line pipeline: simulate, calibrate, train, optimize, report.

Every stage reads and writes plain files in ``--out`` and records what it
wrote in ``manifest.json`` (relative paths plus SHA-256 digests, no
timestamps), so stages can be re-run one at a time and whole runs compared
byte for byte.

Exit status: 0 on success, 1 for bad input or usage, 2 when the numerics
fail (non-finite training loss, out-of-domain physics).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import brain, calib, plant, surrogate
from ._jit import JIT_ENABLED
from .config import SiteConfig, load_site_config
from .errors import CapacityError, DomainError, InfeasibleDutyError, TrainingError, TwinError
from .tracefile import read_trace, write_trace

MANIFEST = "manifest.json"
TRACE_FILE = "trace.csv"
CALIBRATION_FILE = "calibration.csv"
METHODS = ("fixed", "cem", "unipi", "multipi")
MODES = ("data", "piml")
TRAIN_DAYS = 5
MIN_TRAIN_TRACE_DAYS = 7
# Calibration starts this far from the scenario's values so recovery is visible.
DEFAULT_INIT_SCALE = 1.3


class UsageError(TwinError):
    """Bad command-line input."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for numeric failures here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Manifest


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record(out: Path, args, stage: str, written: dict[str, Path]) -> None:
    """Merge one stage's artifacts into the run manifest."""
    path = out / MANIFEST
    if path.exists():
        manifest = json.loads(path.read_text())
    else:
        manifest = {"stages": [], "artifacts": {}}
    manifest["scenario"] = args.scenario or "default"
    manifest["seed"] = args.seed
    manifest["out"] = str(args.out)
    if stage not in manifest["stages"]:
        manifest["stages"].append(stage)
    for name, file in written.items():
        manifest["artifacts"][name] = {"path": file.relative_to(out).as_posix(), "sha256": _digest(file)}
    manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def verify_manifest(out: str | Path) -> list[str]:
    """Artifacts whose file is missing or whose digest no longer matches."""
    out = Path(out)
    manifest = json.loads((out / MANIFEST).read_text())
    bad = []
    for name, entry in manifest["artifacts"].items():
        file = out / entry["path"]
        if not file.exists() or _digest(file) != entry["sha256"]:
            bad.append(name)
    return bad


# ---------------------------------------------------------------------------
# Shared helpers


def _site(args) -> SiteConfig:
    return load_site_config(args.scenario)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_calibration(cfg: SiteConfig, path: Path | None) -> SiteConfig:
    """Site config whose physics carries the calibrated values, when given."""
    if path is None:
        return cfg
    if not path.exists():
        raise UsageError(f"calibration file not found: {path}")
    values = calib.parse_result_csv(path.read_text())
    return replace(cfg, physics=replace(cfg.physics, **values))


def _periods_per_day(trace: plant.Trace) -> int:
    return int(round(86400.0 / trace.timestep))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# Stages


def cmd_simulate(args) -> dict[str, Path]:
    cfg = _site(args)
    if args.days < 1:
        raise UsageError("--days must be >= 1")
    out = _out_dir(args)
    exo = plant.synth_workload_array(args.days, plant.CONTROL_PERIOD_S, args.seed)
    actions = brain.fixed_policy(cfg).actions(exo)
    trace = plant.simulate(actions, exo, cfg)
    path = out / TRACE_FILE
    write_trace(trace, path)
    return {"trace": path}


def cmd_calibrate(args) -> dict[str, Path]:
    cfg = _site(args)
    names = tuple(n.strip() for n in (args.free_params or "").split(",") if n.strip())
    if not names:
        raise UsageError("--free-params needs at least one parameter name")
    trace = read_trace(args.trace, cfg.ambient_pressure)
    if args.days is not None:
        if args.days < 1:
            raise UsageError("--days must be >= 1")
        trace = trace.slice(0, min(len(trace), args.days * _periods_per_day(trace)))
    out = _out_dir(args)
    truth = cfg.physics
    init = {n: getattr(truth, n) * args.init_scale for n in names if hasattr(truth, n)}
    problem = calib.make_problem(trace, truth, names, init)
    result = calib.calibrate(problem, cfg)
    report = calib.identifiability_report(problem, cfg)
    path = out / CALIBRATION_FILE
    path.write_text(calib.result_csv(result, truth, report))
    return {"calibration": path}


def cmd_train(args) -> dict[str, Path]:
    cfg = _site(args)
    trace = read_trace(args.trace, cfg.ambient_pressure)
    per_day = _periods_per_day(trace)
    if len(trace) < MIN_TRAIN_TRACE_DAYS * per_day:
        raise UsageError(
            f"training needs at least {MIN_TRAIN_TRACE_DAYS} days of data, trace has {len(trace) / per_day:.2f}"
        )
    if args.mode == "data":
        lambda_p = 0.0
    else:
        lambda_p = surrogate.TrainConfig.lambda_p if args.lambda_p is None else args.lambda_p
        if not lambda_p > 0:
            raise UsageError("--lambda-p must be > 0 in piml mode")
    tc = surrogate.TrainConfig(lambda_p=lambda_p, seed=args.seed)
    train, test = surrogate.measured_split(trace, surrogate.SensorNoise(), args.seed, TRAIN_DAYS)
    if args.mode == "piml":
        cal = Path(args.calibration) if args.calibration else None
        site = _with_calibration(cfg, cal)
        params, log = surrogate.train_piml(train, site.physics, tc, site)
    else:
        params, log = surrogate.train_data_driven(train, tc)
    out = _out_dir(args)
    model_path = out / f"model_{args.mode}.txt"
    surrogate.save_model(params, model_path)
    err_path = out / f"errors_{args.mode}.csv"
    err_path.write_text(surrogate.evaluate_errors(params, test).to_csv())
    log_path = out / f"trainlog_{args.mode}.csv"
    _write_csv(
        log_path,
        ["epoch", "train_loss", "val_loss", "physics_loss"],
        [
            [k, f"{a:.6e}", f"{b:.6e}", f"{c:.6e}"]
            for k, (a, b, c) in enumerate(zip(log.train_loss, log.val_loss, log.physics_loss))
        ],
    )
    return {f"model_{args.mode}": model_path, f"errors_{args.mode}": err_path, f"trainlog_{args.mode}": log_path}


def cmd_optimize(args) -> dict[str, Path]:
    cfg = _site(args)
    if args.days < 1:
        raise UsageError("--days must be >= 1")
    method = args.method
    theta = cfg.physics
    model = None
    if method in ("unipi", "multipi"):
        models = Path(args.models or args.out)
        model_path = models / "model_piml.txt"
        if not model_path.exists():
            raise UsageError(f"method {method} needs the physics-informed model file {model_path}")
        model = surrogate.load_model(model_path)
        cal = models / CALIBRATION_FILE
        theta = _with_calibration(cfg, cal if cal.exists() else None).physics

    # The held-out week follows the operating week the models were fitted on.
    week = plant.synth_workload_array(args.days, plant.CONTROL_PERIOD_S, args.seed + 1)
    search_log = None
    if method == "fixed":
        policy = brain.fixed_policy(cfg)
    elif method == "cem":
        search_week = plant.synth_workload_array(args.days, plant.CONTROL_PERIOD_S, args.seed)
        policy, search_log = brain.model_free_search(cfg, search_week, seed=args.seed)
    elif method == "unipi":
        policy, _ = brain.uni_pi_optimize(model, theta, cfg, week)
    else:
        policy, _ = brain.multi_pi_optimize(model, theta, cfg, week, seed=args.seed)

    report = brain.evaluate(policy, cfg, week, method, args.seed)
    out = _out_dir(args)
    report_path = out / f"report_{method}.json"
    report_path.write_text(report.to_json())
    periods_path = out / f"periods_{method}.csv"
    periods_path.write_text(report.periods_csv())
    policy_path = out / f"policy_{method}.csv"
    _write_csv(
        policy_path,
        ["period", "sup_set_c", "fan_ratio", "chws_set_c"],
        [[k, *(f"{v:.6f}" for v in a)] for k, a in enumerate(report.period_actions)],
    )
    written = {f"report_{method}": report_path, f"periods_{method}": periods_path, f"policy_{method}": policy_path}
    if search_log is not None:
        search_path = out / f"search_{method}.csv"
        _write_csv(search_path, ["generation", "member", "violating_periods"], search_log.violations)
        written[f"search_{method}"] = search_path
    return written


REPORT_COLUMNS = (
    "method",
    "label",
    "mean_cooling_power",
    "normalized_power",
    "sla_violation_count",
    "sla_violation_periods",
    "power_fans",
    "power_pumps",
    "power_chillers",
    "power_towers",
)


def cmd_report(args) -> dict[str, Path]:
    out = Path(args.out)
    reports = {}
    for path in sorted(out.glob("report_*.json")):
        data = json.loads(path.read_text())
        reports[data["method"]] = data
    if not reports:
        raise UsageError(f"no report_*.json files in {out}")
    order = [m for m in METHODS if m in reports] + sorted(m for m in reports if m not in METHODS)
    rows = []
    for m in order:
        r = reports[m]
        rows.append([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.6f}" for c in REPORT_COLUMNS])
    comparison = out / "comparison.csv"
    _write_csv(comparison, REPORT_COLUMNS, rows)
    written = {"comparison": comparison}

    err_rows = []
    for mode in MODES:
        path = out / f"errors_{mode}.csv"
        if path.exists():
            lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
            for row in csv.reader(lines[1:]):
                err_rows.append([mode, *row])
    if err_rows:
        errors = out / "surrogate_errors.csv"
        _write_csv(errors, ["mode", "target", "mean_rel_err", "max_rel_err"], err_rows)
        written["surrogate_errors"] = errors
    return written


def cmd_pipeline(args) -> dict[str, Path]:
    """simulate -> calibrate -> train (data, piml) -> optimize (all) -> report."""
    out = _out_dir(args)
    written = {}

    def stage(name, fn, **overrides):
        ns = argparse.Namespace(**{**vars(args), "models": None, "calibration": None, **overrides})
        files = fn(ns)
        _record(out, ns, name, files)
        written.update(files)

    trace = str(out / TRACE_FILE)
    stage("simulate", cmd_simulate)
    stage("calibrate", cmd_calibrate, trace=trace, days=TRAIN_DAYS)
    for mode in MODES:
        stage(f"train-{mode}", cmd_train, trace=trace, mode=mode, calibration=str(out / CALIBRATION_FILE))
    for method in METHODS:
        stage(f"optimize-{method}", cmd_optimize, method=method, models=str(out))
    stage("report", cmd_report)
    return written


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tropic-twin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, days_default=7):
        p.add_argument("--scenario", help="site scenario file (default: built-in case study)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        if days_default is not None:
            p.add_argument("--days", type=int, default=days_default)

    p = sub.add_parser("simulate", help="synthesize a week and roll the plant under fixed setpoints")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="recover physics coefficients from a trace")
    common(p, days_default=None)
    p.add_argument("--trace", required=True)
    p.add_argument("--free-params", default=",".join(calib.DEFAULT_FREE_PARAMS))
    p.add_argument("--days", type=int, default=None, help="use only the first N days of the trace")
    p.add_argument("--init-scale", type=float, default=DEFAULT_INIT_SCALE)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="fit a surrogate on 5 days and score it on the rest")
    common(p, days_default=None)
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=MODES, default="piml")
    p.add_argument("--lambda-p", type=float, default=None)
    p.add_argument("--calibration", help="calibration CSV whose recovered values feed the physics term")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize", help="build a policy and evaluate it on the held-out week")
    common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--models", help="directory holding model_piml.txt (default: --out)")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("report", help="merge evaluation reports into comparison tables")
    common(p, days_default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage in order")
    common(p)
    p.add_argument("--free-params", default=",".join(calib.DEFAULT_FREE_PARAMS))
    p.add_argument("--init-scale", type=float, default=DEFAULT_INIT_SCALE)
    p.add_argument("--lambda-p", type=float, default=None)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _apply_thread_cap() -> None:
    raw = os.environ.get("TROPIC_TWIN_THREADS")
    if raw is None or raw.strip() == "":
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TROPIC_TWIN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TROPIC_TWIN_THREADS must be a positive integer, got {raw!r}")
    if JIT_ENABLED:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


NUMERIC_ERRORS = (TrainingError, DomainError, InfeasibleDutyError, CapacityError, FloatingPointError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        written = args.func(args)
        if args.command != "pipeline":
            _record(Path(args.out), args, args.command, written)
    except NUMERIC_ERRORS as exc:
        print(f"tropic-twin: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (TwinError, OSError, ValueError) as exc:
        print(f"tropic-twin: error: {exc}", file=sys.stderr)
        return 1
    for name, path in sorted(written.items()):
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
