"""Command-line driver: ``mhm run | converge | scale | resume``.

Configuration comes from built-in defaults, then an optional JSON file
(``--config``), then the ``MHM_CHECKPOINT_DIR`` environment variable, then
command-line flags; later sources win.

Exit codes: 0 success, 2 usage error, 3 run failed, 4 restart refused.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

from .config import CHECKPOINT_MODES, MODES, RunConfig
from .errors import CheckpointError, ConfigurationError, MHMError, RunFailedError
from .femcore import PROBLEMS, get_problem
from .orchestrator import RunReport, run_pipeline, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_RESTART = 0, 2, 3, 4
ENV_CHECKPOINT_DIR = "MHM_CHECKPOINT_DIR"

log = logging.getLogger("mhm")


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_FLAGS = [
    ("n", int, "coarse grid: n x n squares, two triangles each"),
    ("r", int, "submesh refinement level (2^r divisions per edge)"),
    ("l", int, "multiplier polynomial degree"),
    ("m", int, "sub-intervals per face"),
    ("k", int, "local Lagrange degree"),
    ("problem", str, f"problem data, one of {sorted(PROBLEMS)}"),
    ("mode", str, f"execution mode, one of {MODES}"),
    ("workers", int, "number of worker processes"),
    ("failure_plan", str, "failure injection, e.g. 'random:seed=3,kills=2' or '0:after=1:kind=SolveLocal:crash'"),
    ("checkpoint_dir", str, f"checkpoint root (default ${ENV_CHECKPOINT_DIR})"),
    ("checkpoint_mode", str, f"checkpoint granularity, one of {CHECKPOINT_MODES}"),
    ("seed", int, "seed for randomized failure plans"),
    ("output_dir", str, "directory for report.json, solution.vtk and CSV tables"),
    ("heartbeat_interval", float, "seconds between worker heartbeats"),
    ("missed_heartbeats", int, "missed heartbeats before a worker is declared dead"),
    ("max_attempts", int, "attempts per task before the run fails"),
    ("grace_period", float, "seconds to wait once every worker is dead"),
    ("inject_master_crash", str, "testing hook: locals:<count>, post_split or post_locals"),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", dest="config_file", default=None, help="JSON file with RunConfig fields")
    for name, typ, help_ in _FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=argparse.SUPPRESS, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mhm", description="Two-level MHM Darcy solver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("run", "solve one configuration"), ("resume", "resume a run from its checkpoint")):
        _add_config_flags(sub.add_parser(name, help=help_))
    conv = sub.add_parser("converge", help="error and rate over successive grid doublings")
    _add_config_flags(conv)
    conv.add_argument("--levels", type=int, default=3)
    scale = sub.add_parser("scale", help="wall time and efficiency over worker counts")
    _add_config_flags(scale)
    scale.add_argument("--worker-counts", default="1,2,4,8",
                       help="comma-separated worker counts; the first is the baseline")
    return parser


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    known = set(RunConfig.field_names())
    out = {}
    for key, val in data.items():
        name = key.replace("-", "_")
        if name not in known:
            raise UsageError(f"unknown config key {key!r}")
        out[name] = val
    return out


def _coerce(values: dict) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for name, val in values.items():
        t = types[name]
        try:
            if val is None:
                out[name] = None
            elif t == "int":
                if isinstance(val, bool) or (isinstance(val, float) and not val.is_integer()):
                    raise ValueError(val)
                out[name] = int(val)
            elif t == "float":
                out[name] = float(val)
            else:
                out[name] = val if not isinstance(val, (int, float)) else str(val)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{name}: expected {t}, got {val!r}") from exc
    return out


def config_from_namespace(ns: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values = {}
    if getattr(ns, "config_file", None):
        values.update(load_config_file(ns.config_file))
    if environ.get(ENV_CHECKPOINT_DIR):
        values["checkpoint_dir"] = environ[ENV_CHECKPOINT_DIR]
    values.update({name: getattr(ns, name) for name, _, _ in _FLAGS if hasattr(ns, name)})
    values = _coerce(values)
    if values.get("checkpoint_dir") and "checkpoint_mode" not in values:
        values["checkpoint_mode"] = "fine"
    try:
        config = RunConfig(**values).validate()
        get_problem(config.problem)
    except (ConfigurationError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    return config


def parse_config(args, config_file=None, environ=None) -> RunConfig:
    """Validated RunConfig from flag strings and an optional JSON file.

    Flags override file values.  Invalid flags or combinations raise
    ``UsageError``.
    """
    p = _Parser(prog="mhm")
    _add_config_flags(p)
    ns = p.parse_args(list(args))
    if config_file is not None and not ns.config_file:
        ns.config_file = config_file
    return config_from_namespace(ns, environ)


# ---------------------------------------------------------------- studies

def _rate(e0: float, e1: float) -> float:
    if not (e0 > 0 and e1 > 0 and math.isfinite(e0) and math.isfinite(e1)):
        return math.nan
    return math.log2(e0 / e1)


def run_convergence_study(base: RunConfig, levels: int) -> list[dict]:
    """Solve on n = base.n * 2^j for j < levels and tabulate error and rate."""
    if levels < 2:
        raise ConfigurationError("a convergence study needs at least two levels")
    rows = []
    for j in range(levels):
        cfg = base.with_(n=base.n * 2 ** j)
        try:
            report = run_pipeline(cfg)
        except MHMError as exc:
            raise type(exc)(f"convergence level {j} (n={cfg.n}): {exc}") from exc
        err = report.l2_error if report.l2_error is not None else math.nan
        rows.append({
            "level": j,
            "n": cfg.n,
            "H": 1.0 / cfg.n,
            "L_l": report.dof_counts["L_l"],
            "N_t": report.dof_counts["N_t"],
            "galerkin_equivalent_dofs": report.galerkin_equivalent_dofs,
            "l2_error": err,
            "rate": math.nan if j == 0 else _rate(rows[-1]["l2_error"], err),
        })
    return rows


def run_scaling_study(config: RunConfig, worker_counts) -> list[dict]:
    """Wall time per worker count; efficiency = T_base * W_base / (T * W)."""
    counts = [int(w) for w in worker_counts]
    if len(counts) < 2:
        raise ConfigurationError("a scaling study needs at least two worker counts")
    rows = []
    for w in counts:
        report = run_pipeline(config.with_(workers=w))
        rows.append({"workers": w, "wall_time": report.wall_times["total"],
                     "factorizations": report.factorizations})
    t0, w0 = rows[0]["wall_time"], rows[0]["workers"]
    for row in rows:
        row["speedup"] = t0 / row["wall_time"]
        row["efficiency"] = 100.0 * t0 * w0 / (row["wall_time"] * row["workers"])
    return rows


def write_table_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("nan" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})


def format_scaling_table(rows: list[dict]) -> str:
    lines = [f"{'workers':>8} {'time (s)':>10} {'speedup':>8} {'efficiency':>11}"]
    for r in rows:
        lines.append(f"{r['workers']:>8d} {r['wall_time']:>10.3f} {r['speedup']:>8.2f} {r['efficiency']:>10.2f}%")
    return "\n".join(lines)


def format_convergence_table(rows: list[dict]) -> str:
    lines = [f"{'n':>5} {'L_l':>8} {'l2_error':>12} {'rate':>6}"]
    for r in rows:
        rate = "-" if math.isnan(r["rate"]) else f"{r['rate']:.2f}"
        lines.append(f"{r['n']:>5d} {r['L_l']:>8d} {r['l2_error']:>12.4e} {rate:>6}")
    return "\n".join(lines)


# ---------------------------------------------------------------- main

def _emit_report(report: RunReport, config: RunConfig) -> None:
    if config.output_dir:
        write_outputs(report, config.output_dir, get_problem(config.problem).exact)
    else:
        print(report.to_json())


def _emit_failure(exc: MHMError, config: RunConfig) -> None:
    report = getattr(exc, "report", None)
    if report is not None:
        _emit_report(report, config)
    elif config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(
            {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "config": config.to_dict()},
            indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        config = config_from_namespace(ns)
    except UsageError as exc:
        print(f"mhm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        if ns.command in ("run", "resume"):
            report = run_pipeline(config, resume=ns.command == "resume")
            _emit_report(report, config)
        elif ns.command == "converge":
            rows = run_convergence_study(config, ns.levels)
            print(format_convergence_table(rows))
            if config.output_dir:
                Path(config.output_dir).mkdir(parents=True, exist_ok=True)
                write_table_csv(rows, Path(config.output_dir) / "convergence.csv")
        elif ns.command == "scale":
            try:
                counts = [int(w) for w in ns.worker_counts.split(",") if w.strip()]
            except ValueError:
                print(f"mhm: usage error: bad --worker-counts {ns.worker_counts!r}", file=sys.stderr)
                return EXIT_USAGE
            rows = run_scaling_study(config, counts)
            print(format_scaling_table(rows))
            if config.output_dir:
                out = Path(config.output_dir)
                out.mkdir(parents=True, exist_ok=True)
                write_table_csv(rows, out / "scaling.csv")
                (out / "scaling.json").write_text(json.dumps(rows, indent=2) + "\n")
    except CheckpointError as exc:
        print(f"mhm: restart refused: {exc}", file=sys.stderr)
        return EXIT_RESTART
    except ConfigurationError as exc:
        print(f"mhm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MHMError as exc:
        print(f"mhm: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        _emit_failure(exc, config)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
