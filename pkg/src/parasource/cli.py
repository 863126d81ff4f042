"""Command-line entry point: ``parasource {synth,reconstruct,verify,table}``.

Every command reads an INI file (``--config``) layered over the defaults in
:data:`DEFAULTS`, then ``--set section.key=value`` overrides.  Outputs go to
``[output] dir``; each command writes a ``manifest.json`` echoing the full
resolved configuration, the seed and the package version.

Exit codes: 0 success, 1 configuration error, 2 linear solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time as wallclock
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .grid import NORM_RULES, write_field_csv
from .objective import build_weights, read_trace_csv, write_trace_csv
from .optimizer import (RegularizationSchedule, StoppingCriteria, initial_gamma, run_cga,
                        write_history_csv)
from .pde import ADJOINT_SCHEMES, SOLVER_METHODS, LinearSolveParams, SolverError
from .synth import (DATA_MODES, LEVELS_2D, LEVELS_3D, NoiseSpec, default_data_mode,
                    measured_data, preset)
from . import verification

log = logging.getLogger("parasource")

# section -> key -> (default, description)
DEFAULTS = {
    "problem": {
        "experiment": ("1", "preset 1..6"),
        "level": ("4", "mesh level l, h = 2**-l (2..6 in 2D, 2..4 in 3D)"),
        "dt_ratio": ("1", "time step as a multiple of h; T = 1"),
        "data_mode": ("auto", "computed | exact_formula | auto (exact_formula for experiment 2)"),
    },
    "noise": {
        "delta_percent": ("1", "noise level delta in percent, 0 <= delta < 100"),
        "seed": ("12345", "PCG64 seed"),
        "smooth_halfwidth": ("2", "moving-average half-width applied to noisy data"),
    },
    "regularization": {
        "gamma0": ("auto", "initial weight; auto = (delta/100)**zeta"),
        "zeta": ("0.5", "exponent in the auto gamma0 rule"),
        "p": ("0.5", "decay gamma_m = gamma0 / (m+1)**p"),
        "fixed": ("false", "keep gamma = gamma0 for every iteration"),
    },
    "stopping": {
        "max_iter": ("40", "iteration cap"),
        "theta1": ("0", "stop when ||g|| <= theta1"),
        "theta2": ("0", "stop when the relative change <= theta2"),
    },
    "observation": {
        "band_width": ("1", "number of node layers below the top face carrying weight"),
        "sigma": ("1", "Gaussian decay length of the observation weights"),
    },
    "solver": {
        "method": ("cg", "cg (Jacobi-preconditioned) | direct (sparse LU)"),
        "tolerance": ("1e-10", "relative residual tolerance of CG"),
        "max_iterations": ("2000", "CG iteration cap per solve"),
        "adjoint": ("discrete", "discrete (exact transpose) | continuous (CN of the continuous adjoint)"),
    },
    "reconstruct": {
        "data_file": ("", "trace CSV to invert; empty = synthesise from the preset"),
        "norm": ("trapezoidal", "norm for the relative error and change: trapezoidal | nodal"),
    },
    "table": {
        "experiments": ("1", "comma-separated experiment ids"),
        "levels": ("2-6", "level range lo-hi or a comma list"),
        "deltas": ("1,3", "comma-separated noise levels in percent"),
        "workers": ("1", "parallel processes for independent table cells"),
    },
    "output": {
        "dir": ("out", "output directory"),
    },
}


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field and its origin."""


class Config:
    """Resolved key/value configuration that remembers where each value came from."""

    def __init__(self, path: str | None = None, overrides=()):
        self.values = {s: {k: v for k, (v, _) in keys.items()} for s, keys in DEFAULTS.items()}
        self.origin = {}
        if path is not None:
            self._read_file(path)
        for item in overrides:
            self._apply_override(item)

    def _read_file(self, path: str) -> None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                text = fh.read()
            parser.read_string(text, source=path)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        lines = _key_lines(text)
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}:{lines.get((section, None), '?')}: unknown section [{section}]")
            for key, value in parser.items(section):
                where = f"{path}:{lines.get((section, key), '?')}"
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{where}: unknown key {section}.{key}")
                self.values[section][key] = value.strip()
                self.origin[(section, key)] = where

    def _apply_override(self, item: str) -> None:
        where = f"--set {item}"
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"{where}: expected section.key=value")
        dotted, value = item.split("=", 1)
        section, key = (s.strip().lower() for s in dotted.split(".", 1))
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        self.values[section][key] = value.strip()
        self.origin[(section, key)] = where

    def _fail(self, section: str, key: str, msg: str):
        where = self.origin.get((section, key), "default")
        raise ConfigError(f"{where}: {section}.{key} = {self.values[section][key]!r}: {msg}")

    def raw(self, section: str, key: str) -> str:
        return self.values[section][key]

    def get(self, section: str, key: str, kind=float, check=None, msg: str = ""):
        text = self.values[section][key]
        try:
            value = kind(text)
        except (TypeError, ValueError):
            self._fail(section, key, f"not a valid {kind.__name__}")
        if check is not None and not check(value):
            self._fail(section, key, msg)
        return value

    def choice(self, section: str, key: str, options) -> str:
        value = self.values[section][key].lower()
        if value not in options:
            self._fail(section, key, f"expected one of {', '.join(options)}")
        return value

    def flag(self, section: str, key: str) -> bool:
        value = self.values[section][key].lower()
        if value not in configparser.ConfigParser.BOOLEAN_STATES:
            self._fail(section, key, "expected true or false")
        return configparser.ConfigParser.BOOLEAN_STATES[value]

    def int_list(self, section: str, key: str) -> list[int]:
        text = self.values[section][key].replace(" ", "")
        try:
            if "-" in text and "," not in text:
                lo, hi = (int(v) for v in text.split("-"))
                out = list(range(lo, hi + 1))
            else:
                out = [int(v) for v in text.split(",") if v]
        except ValueError:
            self._fail(section, key, "expected lo-hi or a comma-separated list of integers")
        if not out:
            self._fail(section, key, "empty range")
        return out

    def float_list(self, section: str, key: str) -> list[float]:
        try:
            out = [float(v) for v in self.values[section][key].split(",") if v.strip()]
        except ValueError:
            self._fail(section, key, "expected a comma-separated list of numbers")
        if not out:
            self._fail(section, key, "empty list")
        return out

    def as_dict(self) -> dict:
        return {s: dict(keys) for s, keys in self.values.items()}


def _key_lines(text: str) -> dict:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines.setdefault((section, None), no)
        elif section is not None:
            for sep in "=:":
                if sep in s:
                    lines.setdefault((section, s.split(sep, 1)[0].strip().lower()), no)
                    break
    return lines


@dataclass(frozen=True)
class RunConfig:
    experiment: int
    level: int
    dt_ratio: float
    data_mode: str
    noise: NoiseSpec
    gamma0: float | None
    zeta: float
    p: float
    fixed_gamma: bool
    stop: StoppingCriteria
    band_width: int
    sigma: float
    solver: LinearSolveParams
    adjoint: str
    data_file: str
    norm: str
    out_dir: Path


def _levels_for(experiment: int) -> range:
    return LEVELS_3D if experiment == 6 else LEVELS_2D


def run_config(cfg: Config) -> RunConfig:
    """Validate every value against the preconditions of the module it feeds."""
    exp = cfg.get("problem", "experiment", int, lambda v: 1 <= v <= 6, "expected 1..6")
    levels = _levels_for(exp)
    level = cfg.get("problem", "level", int, lambda v: v in levels,
                    f"expected {levels.start}..{levels.stop - 1} for experiment {exp}")
    dt_ratio = cfg.get("problem", "dt_ratio", float, lambda v: 0 < v <= 2**level,
                       "expected 0 < dt_ratio <= 1/h")
    mode = cfg.choice("problem", "data_mode", DATA_MODES + ("auto",))
    delta = cfg.get("noise", "delta_percent", float, lambda v: 0 <= v < 100, "expected 0 <= delta < 100")
    seed = cfg.get("noise", "seed", int, lambda v: 0 <= v < 2**64, "expected a 64-bit unsigned integer")
    halfwidth = cfg.get("noise", "smooth_halfwidth", int, lambda v: v >= 0, "expected >= 0")
    zeta = cfg.get("regularization", "zeta", float, lambda v: 0 < v < 1, "expected 0 < zeta < 1")
    p = cfg.get("regularization", "p", float, lambda v: 0 < v < 1, "expected 0 < p < 1")
    fixed = cfg.flag("regularization", "fixed")
    if cfg.raw("regularization", "gamma0").lower() == "auto":
        gamma0 = None
    else:
        gamma0 = cfg.get("regularization", "gamma0", float, lambda v: v > 0 or (v == 0 and fixed),
                         "expected gamma0 > 0 (0 only with fixed = true)")
    max_iter = cfg.get("stopping", "max_iter", int, lambda v: v >= 1, "expected at least 1")
    theta1 = cfg.get("stopping", "theta1", float, lambda v: v >= 0, "expected >= 0")
    theta2 = cfg.get("stopping", "theta2", float, lambda v: v >= 0, "expected >= 0")
    n_layers = 2**level + 1
    band = cfg.get("observation", "band_width", int, lambda v: 1 <= v <= n_layers,
                   f"expected 1..{n_layers}")
    sigma = cfg.get("observation", "sigma", float, lambda v: v > 0, "expected > 0")
    method = cfg.choice("solver", "method", SOLVER_METHODS)
    tol = cfg.get("solver", "tolerance", float, lambda v: 0 < v < 1, "expected 0 < tolerance < 1")
    maxit = cfg.get("solver", "max_iterations", int, lambda v: v >= 1, "expected at least 1")
    adjoint = cfg.choice("solver", "adjoint", ADJOINT_SCHEMES)
    norm = cfg.choice("reconstruct", "norm", NORM_RULES)
    return RunConfig(
        experiment=exp, level=level, dt_ratio=dt_ratio,
        data_mode=default_data_mode(exp) if mode == "auto" else mode,
        noise=NoiseSpec(delta, seed, halfwidth),
        gamma0=gamma0, zeta=zeta, p=p, fixed_gamma=fixed,
        stop=StoppingCriteria(theta1, theta2, max_iter),
        band_width=band, sigma=sigma,
        solver=LinearSolveParams(tol, maxit, method), adjoint=adjoint,
        data_file=cfg.raw("reconstruct", "data_file"), norm=norm,
        out_dir=Path(cfg.raw("output", "dir")),
    )


def _problem(rc: RunConfig, experiment: int | None = None, level: int | None = None,
             delta: float | None = None) -> tuple:
    exp = rc.experiment if experiment is None else experiment
    lv = rc.level if level is None else level
    n_steps = max(1, round(2**lv / rc.dt_ratio))
    spec, _ = preset(exp, lv, n_steps)
    noise = rc.noise if delta is None else replace(rc.noise, delta_percent=delta)
    return spec, noise


def _schedule(rc: RunConfig, delta: float) -> RegularizationSchedule:
    gamma0 = initial_gamma(delta, rc.zeta) if rc.gamma0 is None else rc.gamma0
    return RegularizationSchedule(gamma0, rc.p, rc.fixed_gamma)


def _write_manifest(out: Path, command: str, cfg: Config, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": int(cfg.raw("noise", "seed")),
        "config": cfg.as_dict(),
    }
    manifest.update(extra or {})
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(cfg: Config) -> dict:
    rc = run_config(cfg)
    spec, noise = _problem(rc)
    traces = measured_data(spec, noise, rc.data_mode, rc.solver)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    for name, trace in traces.items():
        write_trace_csv(rc.out_dir / f"{name}_trace.csv", spec.grid, spec.time, trace)
    _write_manifest(rc.out_dir, "synth", cfg, {"data_mode": rc.data_mode})
    return {name: str(rc.out_dir / f"{name}_trace.csv") for name in traces}


def reconstruct_one(rc: RunConfig, experiment: int, level: int, delta: float, data=None):
    spec, noise = _problem(rc, experiment, level, delta)
    if data is None:
        data = measured_data(spec, noise, rc.data_mode, rc.solver)["smoothed"]
    w = build_weights(spec.grid, rc.band_width, rc.sigma)
    result = run_cga(spec, data, w, _schedule(rc, delta), rc.stop, rc.solver,
                     norm=rc.norm, adjoint=rc.adjoint)
    return spec, result


def cmd_reconstruct(cfg: Config) -> dict:
    rc = run_config(cfg)
    if rc.gamma0 is None and rc.noise.delta_percent == 0:
        cfg._fail("regularization", "gamma0", "auto needs delta_percent > 0; give gamma0 explicitly")
    data = None
    if rc.data_file:
        spec, _ = _problem(rc)
        try:
            _, data = read_trace_csv(rc.data_file)
        except (OSError, ValueError) as exc:
            cfg._fail("reconstruct", "data_file", str(exc))
        if data.shape != (spec.time.n_steps + 1,) + spec.grid.shape[:-1]:
            cfg._fail("reconstruct", "data_file",
                      f"trace shape {data.shape} does not fit level {rc.level} with dt_ratio {rc.dt_ratio}")
    spec, result = reconstruct_one(rc, rc.experiment, rc.level, rc.noise.delta_percent, data)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    write_field_csv(rc.out_dir / "F_final.csv", spec.grid, result.F_final)
    write_history_csv(rc.out_dir / "history.csv", result)
    summary = {"termination_reason": result.termination_reason, "iterations": result.iterations}
    if spec.F_true is not None:
        summary["final_theta"] = result.final_theta
    _write_manifest(rc.out_dir, "reconstruct", cfg, summary)
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def cmd_verify(cfg: Config) -> dict:
    rc = run_config(cfg)
    report = _jsonable(verification.run_all(rc.solver))
    report["passed"] = all(v["passed"] for v in report.values())
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    with open(rc.out_dir / "verify.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(rc.out_dir, "verify", cfg, {"passed": report["passed"]})
    return report


def _table_cell(args) -> float:
    rc, exp, level, delta = args
    return reconstruct_one(rc, exp, level, delta)[1].final_theta


def cmd_table(cfg: Config) -> list:
    rc = run_config(cfg)
    experiments = cfg.int_list("table", "experiments")
    levels = cfg.int_list("table", "levels")
    deltas = cfg.float_list("table", "deltas")
    workers = cfg.get("table", "workers", int, lambda v: v >= 1, "expected at least 1")
    for exp in experiments:
        if not 1 <= exp <= 6:
            cfg._fail("table", "experiments", f"unknown experiment {exp}")
        allowed = _levels_for(exp)
        bad = [lv for lv in levels if lv not in allowed]
        if bad:
            cfg._fail("table", "levels", f"levels {bad} outside {allowed.start}..{allowed.stop - 1} "
                                         f"for experiment {exp}")
    lowest = 0.0 if rc.gamma0 is not None else np.nextafter(0.0, 1.0)
    for d in deltas:
        if not lowest <= d < 100:
            cfg._fail("table", "deltas", f"noise level {d} outside the admissible range "
                                         "(delta = 0 needs an explicit gamma0)")

    columns = [(e, d) for e in experiments for d in deltas]
    jobs = [(rc, e, lv, d) for lv in levels for (e, d) in columns]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            thetas = list(pool.map(_table_cell, jobs))
    else:
        thetas = [_table_cell(job) for job in jobs]

    rows = [[lv] + thetas[i * len(columns):(i + 1) * len(columns)] for i, lv in enumerate(levels)]
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    with open(rc.out_dir / "table.csv", "w", newline="") as fh:
        fh.write(",".join(["level"] + [f"exp{e}_delta{d:g}" for e, d in columns]) + "\n")
        for row in rows:
            fh.write(",".join([str(row[0])] + [f"{v:.17g}" for v in row[1:]]) + "\n")
    _write_manifest(rc.out_dir, "table", cfg)
    return rows


COMMANDS = {
    "synth": (cmd_synth, "synthesise clean, noisy and smoothed boundary traces"),
    "reconstruct": (cmd_reconstruct, "run the conjugate-gradient source reconstruction"),
    "verify": (cmd_verify, "run the numerical verification studies"),
    "table": (cmd_table, "relative-error table over levels and noise levels"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parasource", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="FILE", help="INI configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--timings", action="store_true",
                       help="write wall-clock timings to timings.json in the output directory")
        p.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub.add_parser("defaults", help="print the default configuration as INI")
    return parser


def print_defaults(stream=sys.stdout) -> None:
    for section, keys in DEFAULTS.items():
        stream.write(f"[{section}]\n")
        for key, (value, text) in keys.items():
            stream.write(f"# {text}\n{key} = {value}\n")
        stream.write("\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        print_defaults()
        return 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    start = wallclock.perf_counter()
    try:
        cfg = Config(args.config, args.overrides)
        result = func(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    elapsed = wallclock.perf_counter() - start
    if args.timings:
        out = Path(cfg.raw("output", "dir"))
        with open(out / "timings.json", "w") as fh:
            json.dump({"command": args.command, "wall_seconds": elapsed}, fh, indent=2)
            fh.write("\n")
    if args.command == "verify":
        for name, entry in result.items():
            if isinstance(entry, dict):
                print(f"{name}: {'PASS' if entry['passed'] else 'FAIL'}")
    elif args.command == "reconstruct":
        print(json.dumps(result, sort_keys=True))
    elif args.command == "table":
        print(f"wrote {len(result)} rows to {Path(cfg.raw('output', 'dir')) / 'table.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
