"""Command line entry point: ``convexint <ledger|lemmas|perturb|iterate|report>``.

Exit codes: 0 all checks pass, 1 a check failed, 2 the config or the
arguments could not be parsed, 3 a validity gate refused the parameters.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .blocks import ParamError, SchemeParams
from .fields import FieldError, save_field, set_threads
from .geometry import GeometryError, make_xi_basis
from .ledger import (CSV_COLUMNS, LedgerError, feasible_parameters, format_table, sweep, table_to_csv,
                     table_to_json, verify_exponent_inequalities)
from .perturb import (GateError, IterationReport, PhiProfile, StepConfig, StepError, StepReport,
                      Triple, initial_triple, iterate, perturbation_step, shear_triple, TERMS)
from .suites import GROUPS, SUITES, run_suites

EXIT_OK, EXIT_CHECK, EXIT_PARSE, EXIT_GATE = 0, 1, 2, 3


class ConfigError(ValueError):
    """The first offending key is in ``key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# ---------------------------------------------------------------- configuration


@dataclass
class GridConfig:
    d: int = 3
    N: int = 64
    t_start: float = 0.0
    t_end: float = 1.0
    pad: float = 0.5
    dt: float = 1 / 512


@dataclass
class DataConfig:
    kind: str = "shear"
    amplitude: float = 1.0
    eps: float = 0.3
    speed: float = 1.0
    rho_bar: float = 0.3
    beta: float = 0.1
    k: int = 1
    phi_t: list = field(default_factory=lambda: [0.0, 1.0])
    phi_v: list = field(default_factory=lambda: [0.25, 0.5])


@dataclass
class Tolerances:
    cde: float = 1e-2
    cancel: float = 1e-2
    div_b: float = 1e-8
    mean: float = 1e-10
    fd_reduction: float = 3.0


@dataclass
class RunConfig:
    mode: str
    grid: GridConfig
    data: DataConfig
    schedule: list          # (SchemeParams, StepConfig) per step
    tolerances: Tolerances
    steps: int = 1
    dt_in: list | None = None
    seed: int = 0
    out: str = "runs/out"
    master: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def params(self) -> SchemeParams:
        return self.schedule[0][0]

    @property
    def step(self) -> StepConfig:
        return self.schedule[0][1]

    def digest(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()


_SECTIONS = {"run", "grid", "data", "scheme", "step", "tolerances", "iterate"}


def _fill(cls, section: dict, name: str, index: int | None = None, skip=()):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        if isinstance(value, list) and index is not None and known[key].type not in ("list", "list | None"):
            if not value:
                raise ConfigError(f"{name}.{key}", "empty per-step list")
            value = value[min(index, len(value) - 1)]
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
    run = dict(raw.get("run", {}))
    for key in run:
        if key not in ("mode", "seed", "out", "master"):
            raise ConfigError(f"run.{key}", "unknown key")
    mode = run.get("mode", "perturb")
    if mode not in ("ledger", "lemmas", "perturb", "iterate"):
        raise ConfigError("run.mode", f"unknown mode {mode!r}")
    grid = _fill(GridConfig, raw.get("grid", {}), "grid")
    data = _fill(DataConfig, raw.get("data", {}), "data")
    if data.kind not in ("shear", "initial"):
        raise ConfigError("data.kind", f"unknown data kind {data.kind!r}")
    tol = _fill(Tolerances, raw.get("tolerances", {}), "tolerances")
    it = dict(raw.get("iterate", {}))
    for key in it:
        if key not in ("steps", "dt_in"):
            raise ConfigError(f"iterate.{key}", "unknown key")
    steps = int(it.get("steps", 1))
    if steps < 1:
        raise ConfigError("iterate.steps", "must be at least 1")
    seed = int(run.get("seed", 0)) if seed is None else int(seed)
    schedule = []
    for k in range(steps):
        try:
            params = _fill(SchemeParams, raw.get("scheme", {}), "scheme", index=k)
        except ParamError as exc:
            raise ConfigError("scheme", str(exc)) from exc
        if params.d != grid.d:
            raise ConfigError("scheme.d", "must match grid.d")
        sc = raw.get("step", {})
        if "dt_out" not in sc or "dt_sub" not in sc:
            raise ConfigError("step.dt_out" if "dt_out" not in sc else "step.dt_sub", "required")
        cfg = _fill(StepConfig, sc, "step", index=k, skip=("anchors",))
        cfg.anchors = sc.get("anchors")
        cfg.tol_cde, cfg.tol_cancel = tol.cde, tol.cancel
        if cfg.anchors is None:
            cfg.anchor_seed = seed
        schedule.append((params, cfg))
    dt_in = it.get("dt_in")
    if dt_in is not None and len(dt_in) < steps:
        raise ConfigError("iterate.dt_in", "needs one entry per step")
    return RunConfig(mode, grid, data, schedule, tol, steps, dt_in, seed,
                     str(run.get("out", "runs/out")), bool(run.get("master", True)), raw)


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read ({exc.strerror})") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML ({exc})") from exc
    return parse_config(raw, seed)


def build_triple(cfg: RunConfig) -> Triple:
    g, dcfg = cfg.grid, cfg.data
    if dcfg.kind == "shear":
        basis = make_xi_basis(g.d, cfg.params.lam)
        return shear_triple(g.N, basis, g.t_start, g.t_end, g.pad, g.dt, dcfg.amplitude, dcfg.eps,
                            dcfg.speed, dcfg.rho_bar, dcfg.beta)
    phi = PhiProfile(tuple(dcfg.phi_t), tuple(dcfg.phi_v))
    return initial_triple(phi, dcfg.k, g.N, g.t_start, g.t_end, g.pad, g.dt, cfg.params.q, g.d)


# ---------------------------------------------------------------- reports


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def step_checks(rep: StepReport, tol: Tolerances) -> dict:
    """Pass/fail of every configured check on a step report."""
    out = {
        "div_b": rep.div_b <= tol.div_b,
        "mean_conservation": rep.mean_drift <= tol.mean,
        "split_exact": rep.split_exactness == 0.0,
        "cde": bool(rep.cde["passed"]),
        "finite": all(np.isfinite(v) for v in rep.error_norms.values()),
    }
    if rep.cancellation:
        c = rep.cancellation
        out["cancellation"] = c["total"] <= c["bound"]
        out["fd_reduction"] = c["fd_reduction"] >= tol.fd_reduction
    return out


def _report_payload(rep: StepReport) -> dict:
    d = rep.as_dict()
    d.pop("timing", None)  # wall-clock times go to a separate file
    return d


def report_to_csv(report: dict, out_dir) -> list[Path]:
    """CSV tables from a JSON report: per-term norms, traces, iteration series, ledger rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    steps = report.get("steps")
    if steps is None and "error_norms" in report:
        steps = [report]
    if steps is not None:
        path = out / "error_terms.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "term", "max_L1"])
            for k, s in enumerate(steps):
                for term in TERMS:
                    w.writerow([k, term, repr(float(s["error_norms"][term]))])
        written.append(path)
        path = out / "traces.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t"] + list(TERMS))
            for k, s in enumerate(steps):
                for i, t in enumerate(s["sample_times"]):
                    w.writerow([k, repr(float(t))] + [repr(float(s["error_traces"][term][i])) for term in TERMS])
        written.append(path)
    if "rho_increments" in report or report.get("kind") == "iteration":
        path = out / "iteration.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "rho_increment_Lq", "b_increment_W1p", "energy_error", "t_end"])
            for k, (a, b, e, win) in enumerate(zip(report.get("rho_increments", []), report.get("b_increments", []),
                                                  report.get("energy_error", []), report.get("windows", []))):
                w.writerow([k, repr(float(a)), repr(float(b)), "" if e is None else repr(float(e)), repr(float(win[1]))])
        written.append(path)
    if "rows" in report:
        path = out / "ledger.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in report["rows"]:
                w.writerow(row)
        written.append(path)
    return written


# ---------------------------------------------------------------- commands


def _print_checks(checks: dict) -> None:
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")


def cmd_ledger(args) -> int:
    out = Path(args.out) if args.out else None
    if args.sweep:
        try:
            results = sweep([3, 4, 5], [Fraction(3, 2), Fraction(2), Fraction(3)])
        except LedgerError as exc:
            print(f"FAIL  {exc}")
            return EXIT_CHECK
        print(f"sweep: {len(results)} rows, all passing")
        if out:
            out.mkdir(parents=True, exist_ok=True)
            table_to_csv(results, out / "ledger_sweep.csv")
            table_to_json(results, out / "ledger_sweep.json")
        return EXIT_OK
    try:
        choice = feasible_parameters(args.d, Fraction(args.q))
        alpha = Fraction(args.alpha) * choice.delta
        results = verify_exponent_inequalities(choice, alpha)
    except (LedgerError, ValueError, ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(f"delta({args.d}, {args.q}) = {choice.delta}")
    print(format_table(results))
    if out:
        out.mkdir(parents=True, exist_ok=True)
        table_to_csv(results, out / "ledger.csv")
        table_to_json(results, out / "ledger.json", choice)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_lemmas(args) -> int:
    lam, n, seed = args.lam, args.N, args.seed or 0
    kwargs = {
        "partition": {"lams": (lam, 2 * lam), "seed": seed},
        "path-defect": {"lams": (lam, 2 * lam), "seed": seed},
        "trace": {"lam": lam, "n": n, "seed": seed},
        "crawl": {"lams": (lam, 2 * lam), "n": n},
        "antidiv": {"n": n, "seed": seed},
        "blocks": {"n": n},
        "trajectory": {"seed": seed},
    }
    try:
        results = run_suites(args.suite, **kwargs)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_PARSE
    for res in results:
        print(f"[{res.name}] {res.elapsed:.1f} s")
        for c in res.checks:
            print("  " + c.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_json({"suite": args.suite, "version": __version__,
                   "results": [dict(r.as_dict(), elapsed=None) for r in results]}, out / "lemmas.json")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config", "required")
    cfg = load_config(args.config, args.seed)
    if args.out:
        cfg.out = args.out
    return cfg


def _dump_step_fields(step, rep: StepReport, out: Path, prefix: str = "") -> None:
    for i, t in enumerate(rep.sample_times):
        snap = step.snapshot(t)
        save_field(snap.rho_new, out / f"{prefix}rho_{i}.bin", t)
        save_field(snap.b_new, out / f"{prefix}b_{i}.bin", t)
        save_field(snap.R_new, out / f"{prefix}R_{i}.bin", t)


def cmd_perturb(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tri = build_triple(cfg)
    params, step_cfg = cfg.schedule[0]
    try:
        _, rep, step = perturbation_step(tri, params, step_cfg, with_master=cfg.master)
    except GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        dump_json({"error": str(exc), "gates": [g.as_dict() for g in exc.gates]}, out / "gates.json")
        return EXIT_GATE
    except StepError as exc:
        print(f"step failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    checks = step_checks(rep, cfg.tolerances)
    payload = {"kind": "step", "version": __version__, "config_hash": cfg.digest(),
               "checks": checks, **_report_payload(rep)}
    dump_json(payload, out / "report.json")
    dump_json(rep.timing, out / "timing.json")
    report_to_csv(_jsonable(payload), out)
    if args.dump_fields:
        _dump_step_fields(step, rep, out)
    print(json.dumps(_jsonable({"error_norms": rep.error_norms, "cancellation": {
        k: v for k, v in rep.cancellation.items() if k != "per_time"}}), indent=2, sort_keys=True))
    _print_checks(checks)
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def cmd_iterate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tri = build_triple(cfg)
    try:
        _, it = iterate(tri, cfg.schedule, cfg.steps, cfg.dt_in, with_master=False)
    except GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        dump_json({"error": str(exc), "gates": [g.as_dict() for g in exc.gates]}, out / "gates.json")
        return EXIT_GATE
    except StepError as exc:
        print(f"iteration failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    checks = [step_checks(s, cfg.tolerances) for s in it.steps]
    payload = {"kind": "iteration", "version": __version__, "config_hash": cfg.digest(),
               "checks": checks, "steps": [_report_payload(s) for s in it.steps],
               "rho_increments": it.rho_increments, "b_increments": it.b_increments,
               "energy_error": it.energy_error, "windows": it.windows}
    dump_json(payload, out / "report.json")
    report_to_csv(_jsonable(payload), out)
    for k, c in enumerate(checks):
        print(f"step {k}:")
        _print_checks(c)
    return EXIT_OK if all(all(c.values()) for c in checks) else EXIT_CHECK


def cmd_report(args) -> int:
    src = Path(args.input or (Path(args.out or ".") / "report.json"))
    try:
        report = json.loads(src.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read {src}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    written = report_to_csv(report, args.out or src.parent)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dump-fields", action="store_true", help="write field snapshots")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    parser = _Parser(prog="convexint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("ledger", parents=[common], help="exact exponent bookkeeping")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--q", default="2")
    p.add_argument("--alpha", default="0", help="alpha as a fraction of delta")
    p.add_argument("--sweep", action="store_true")
    p = sub.add_parser("lemmas", parents=[common], help="numerical lemma suites")
    p.add_argument("--suite", default="all", choices=sorted(set(SUITES) | set(GROUPS)))
    p.add_argument("--lambda", dest="lam", type=int, default=4)
    p.add_argument("--N", type=int, default=64)
    sub.add_parser("perturb", parents=[common], help="one perturbation step")
    sub.add_parser("iterate", parents=[common], help="several perturbation steps")
    p = sub.add_parser("report", parents=[common], help="CSV tables from a JSON report")
    p.add_argument("--input", help="report.json (default: <out>/report.json)")
    return parser


COMMANDS = {"ledger": cmd_ledger, "lemmas": cmd_lemmas, "perturb": cmd_perturb,
            "iterate": cmd_iterate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ParamError, FieldError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
