"""Command-line runner: ``game-lab <command> [options] [key=value ...]``.

Every run writes its CSV (or JSON) artifacts plus ``run.json`` (config echo,
step actually used, seed, wall time, checksums) and ``manifest.json`` (enough
to re-run it with ``game-lab rerun``). Exit status: 0 ok, 1 invalid input,
2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .core import (GameLabError, GameParams, SystemicRiskQuery, ValidationError,
                   load_params, params_dict, params_from_mapping, validate_params)

COMMANDS = ("validate", "riccati", "kernels", "simulate", "systemic", "liquidity",
            "fabsde", "nashgap")
SCHEMA_VERSION = 1
DEFAULT_DT = {"riccati": 1e-3, "kernels": 1e-2, "simulate": 1e-2, "systemic": 1e-3,
              "liquidity": 1e-2, "fabsde": 5e-3, "nashgap": 2.5e-3}
DEFAULT_PATHS = {"simulate": 10_000, "systemic": 100_000, "fabsde": 50_000, "nashgap": 10_000}


@dataclass
class ExperimentManifest:
    command: str
    params_file: str | None = None
    overrides: list = field(default_factory=list)
    output_dir: str = "."
    seed: int = 0
    dt: float | None = None
    n_paths: int | None = None
    format: str = "csv"
    tau_sweep: list | None = None
    D: float = -0.7
    threads: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValidationError("UNKNOWN_COMMAND", self.command)
        if self.format not in ("csv", "json"):
            raise ValidationError("BAD_CONFIG", f"unknown format {self.format!r}")


def _params(man: ExperimentManifest) -> GameParams:
    over = {}
    for item in man.overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValidationError("BAD_CONFIG", f"override {item!r} is not key=value")
        over[key.strip()] = val.strip()
    if man.params_file:
        return load_params(man.params_file, over)
    return params_from_mapping(over)


def _seed(man):
    return int(man.seed)


def _n_paths(man):
    return int(man.n_paths or DEFAULT_PATHS[man.command])


def _dt(man):
    return float(man.dt or DEFAULT_DT[man.command])


def _taus(man, p):
    return [float(t) for t in man.tau_sweep] if man.tau_sweep else [p.delay]


def _run_validate(man, p):
    validate_params(p)
    return {}, {"valid": True}


def _run_riccati(man, p):
    from .riccati import solve_riccati
    sol = solve_riccati(p, _dt(man))
    return {"riccati": sol.to_csv()}, {"dt_used": sol.dt}


def _run_kernels(man, p):
    from .ekernels import boundary_residuals, dump_kernels, solve_e_system
    k = solve_e_system(p, _dt(man), keep_e2=False)
    binary = Path(man.output_dir) / "kernels.bin"
    dump_kernels(k, binary)
    return {"kernels": k.to_csv()}, {"dt_used": k.dt, "binary": binary.name,
                                     "boundary_residuals": boundary_residuals(k)}


def _run_simulate(man, p):
    from .simulate import simulate_equilibrium, summary_csv, summary_row
    query = SystemicRiskQuery(man.D)
    rows = []
    for tau in _taus(man, p):
        b = simulate_equilibrium(p.with_(delay=tau, delay_measure=None), _dt(man),
                                 _n_paths(man), _seed(man), threads=man.threads)
        rows.append(summary_row(b, query))
    return {"simulate": summary_csv(rows)}, {"dt_used": [r["dt"] for r in rows]}


def _run_systemic(man, p):
    from .riccati import systemic_prob_closed_form
    from .simulate import estimate_systemic_prob, simulate_zero_control
    query = SystemicRiskQuery(man.D)
    closed = systemic_prob_closed_form(p, query)
    # Xbar does not depend on the controls, so the cheapest driver gives the same law
    b = simulate_zero_control(p, _dt(man), _n_paths(man), _seed(man), threads=man.threads)
    prob, se = estimate_systemic_prob(b, query)
    z = (prob - closed) / se if se > 0 else float("nan")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["D", "tau", "dt", "n_paths", "closed_form", "mc_estimate", "mc_se", "z_score"])
    w.writerow([repr(query.default_level), repr(p.delay), repr(b.dt), b.n_paths,
                repr(closed), repr(prob), repr(se), repr(z)])
    return {"systemic": buf.getvalue()}, {"dt_used": b.dt}


def _run_liquidity(man, p):
    from .experiments import liquidity_csv, liquidity_study
    curves = liquidity_study(p, _taus(man, p), _dt(man))
    return {"liquidity": liquidity_csv(curves)}, {"dt_used": [c.dt for c in curves]}


def _run_fabsde(man, p):
    from .fabsde import FabsdeConfig, solve_fabsde
    sol = solve_fabsde(p, FabsdeConfig(dt=_dt(man), n_paths=_n_paths(man)), _seed(man))
    return ({"fabsde_residuals": sol.residuals_csv(), "fabsde_summary": sol.summary_csv()},
            {"dt_used": sol.dt, "ybar_sup": sol.stats["ybar_sup"]})


def _run_nashgap(man, p):
    from .ekernels import solve_e_system
    from .nashgap import DeviationSpec, nash_gap, nashgap_csv
    k = solve_e_system(p, _dt(man), keep_e2=False)
    devs = [DeviationSpec(0, "constant_shift", 0.0), DeviationSpec(0, "constant_shift", 0.2),
            DeviationSpec(0, "scaled_feedback", 1.5)]
    res = [nash_gap(p, k, d, k.dt, _n_paths(man), _seed(man), threads=man.threads)
           for d in devs]
    return {"nashgap": nashgap_csv(res)}, {"dt_used": k.dt}


HANDLERS = {name: globals()[f"_run_{name}"] for name in COMMANDS}


def _csv_to_json(text: str) -> str:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = []
    for row in reader:
        vals = []
        for v in row:
            if v == "":
                vals.append(None)
                continue
            try:
                vals.append(int(v))
            except ValueError:
                try:
                    vals.append(float(v))
                except ValueError:
                    vals.append(v)
        rows.append(vals)
    return json.dumps({"schema_version": SCHEMA_VERSION, "columns": header, "rows": rows},
                      indent=1, allow_nan=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def run(man: ExperimentManifest) -> int:
    """Execute one experiment; returns the process exit status."""
    start = time.perf_counter()
    try:
        out = Path(man.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = _params(man)
        if man.command != "validate":
            validate_params(p, allow_convexity_boundary=man.command == "riccati")
        tables, info = HANDLERS[man.command](man, p)
        written = {}
        for name, text in tables.items():
            if man.format == "json":
                path = out / f"{name}.json"
                path.write_text(_csv_to_json(text))
            else:
                path = out / f"{name}.csv"
                path.write_text(text)
            written[path.name] = _sha256(path)
        if "binary" in info:
            written[info["binary"]] = _sha256(out / info["binary"])
        meta = {
            "schema_version": SCHEMA_VERSION,
            "version": __version__,
            "command": man.command,
            "params": params_dict(p),
            "overrides": list(man.overrides),
            "seed": man.seed,
            "dt_requested": man.dt if man.dt is not None else DEFAULT_DT.get(man.command),
            "n_paths": man.n_paths if man.n_paths is not None else DEFAULT_PATHS.get(man.command),
            "threads": man.threads,
            "deterministic": man.deterministic,
            "wall_time_s": time.perf_counter() - start,
            "artifacts": written,
            **_jsonable(info),
        }
        (out / "run.json").write_text(json.dumps(meta, indent=1) + "\n")
        (out / "manifest.json").write_text(json.dumps(asdict(man), indent=1) + "\n")
    except GameLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return 3
    if man.command == "validate":
        print("valid")
    else:
        for name in written:
            print(out / name)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="game-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="parameter overrides applied after --params")
        sp.add_argument("--params", help="key = value parameter file")
        sp.add_argument("--output", default=".", help="directory for artifacts")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--n-paths", type=int)
        sp.add_argument("--threads", type=int,
                        help="worker threads, 0 = auto (env GAME_LAB_THREADS)")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
        sp.add_argument("--tau-sweep", type=_float_list)
        sp.add_argument("--D", type=float, default=-0.7, help="systemic default level")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
    rr = sub.add_parser("rerun", help="re-execute a manifest.json")
    rr.add_argument("manifest")
    rr.add_argument("--output")
    return parser


def _threads(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("GAME_LAB_THREADS", "")
    try:
        return int(env) if env else 0
    except ValueError:
        raise ValidationError("BAD_CONFIG", f"GAME_LAB_THREADS={env!r} is not an integer") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            data = json.loads(Path(args.manifest).read_text())
            if args.output:
                data["output_dir"] = args.output
            man = ExperimentManifest(**data)
        else:
            man = ExperimentManifest(
                command=args.command, params_file=args.params, overrides=args.overrides,
                output_dir=args.output, seed=args.seed, dt=args.dt, n_paths=args.n_paths,
                format=args.format, tau_sweep=args.tau_sweep, D=args.D,
                threads=_threads(args.threads), deterministic=args.deterministic)
    except GameLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_status
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: cannot read manifest: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, OSError) else 1
    return run(man)


if __name__ == "__main__":
    sys.exit(main())
