"""Command-line entry point: ``structured-gic <command> [options]``.

Commands
--------
fit         solve the penalized problem at one ``--lambda``
path        regularization path with per-point GIC, as a CSV table
select      path + GIC selection; for at most 12 groups also the exhaustive GIC table
experiment  Monte-Carlo study from an experiment JSON (``--config``)
diagnose    assumption report on a synthetic instance described by ``--config``

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures (partial outputs are still written and flagged).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateData, InvalidShape, NotConverged, PsiBudgetExceeded
from .experiments import (
    McConfig,
    check_assumptions,
    fmt,
    gen_group_glm,
    gen_lowrank,
    monte_carlo,
    regularizer_for,
    same_subspace,
)
from .losses import LossProblem, read_csv_dataset, read_matrix_json
from .model_space import GroupL2, GroupPartition, GroupSupport, Nuclear, subspace_to_json
from .path_gic import (
    PathSelection,
    all_group_supports,
    default_psi_budget,
    extract_model,
    lambda_grid,
    schedule_for,
    select_exhaustive,
    select_on_path,
    xi_n,
)
from .solver import SolveOptions, solve_regularized

log = logging.getLogger("structured_gic")

COMMANDS = ("fit", "path", "select", "experiment", "diagnose")
REGULARIZERS = ("auto", "group", "l1", "nuclear")
EXHAUSTIVE_MAX_GROUPS = 12
PATH_COLUMNS = ("lambda", "kkt", "support_size_or_rank", "loss", "psi_sq", "a_n", "gic", "selected", "status")
EXHAUSTIVE_COLUMNS = ("S", "support_size", "loss", "psi_sq", "a_n", "gic", "selected")
SWEEP_COLUMNS = ("c_xi", "lambda_hat", "support_size_or_rank", "gic", "S")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunConfig:
    """Everything a run depends on. Serializes to and from a flat JSON object."""

    command: str = "select"
    data: Optional[str] = None
    family: str = "gaussian"
    reg: str = "auto"
    groups_file: Optional[str] = None
    group_size: Optional[int] = None
    lam: Optional[float] = None
    k_grid: int = 50
    ratio: float = 1e-3
    c_gic: float = 1.0
    log_n: bool = False
    c_xi: float = 0.5
    c_xi_sweep: Optional[str] = None
    psi_budget: Optional[float] = None
    max_iter: int = 5000
    tol_kkt: float = 1e-7
    config: Optional[str] = None
    n: Optional[int] = None
    seed: int = 0
    kappa: Optional[float] = None
    tau_sq: float = 0.0
    eta: float = 1.0
    rsc_trials: int = 200
    out: Optional[str] = None
    out_dir: Optional[str] = None
    json: bool = False
    verbose: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command: expected one of {', '.join(COMMANDS)}, got {self.command!r}")
        if self.reg not in REGULARIZERS:
            raise ConfigError(f"--reg: expected one of {', '.join(REGULARIZERS)}, got {self.reg!r}")
        if self.family not in ("gaussian", "logistic"):
            raise ConfigError(f"--family: expected gaussian or logistic, got {self.family!r}")
        checks = [
            ("--k-grid", self.k_grid >= 2, "must be >= 2"),
            ("--ratio", 0 < self.ratio < 1, "must lie in (0, 1)"),
            ("--c-gic", self.c_gic > 0, "must be positive"),
            ("--c-xi", self.c_xi >= 0, "must be nonnegative"),
            ("--max-iter", self.max_iter >= 1, "must be >= 1"),
            ("--tol-kkt", self.tol_kkt > 0, "must be positive"),
            ("--psi-budget", self.psi_budget is None or self.psi_budget >= 0, "must be nonnegative"),
            ("--group-size", self.group_size is None or self.group_size >= 1, "must be >= 1"),
            ("--lambda", self.lam is None or self.lam > 0, "must be positive"),
            ("--threads", self.threads is None or self.threads >= 1, "must be >= 1"),
            ("--rsc-trials", self.rsc_trials >= 0, "must be nonnegative"),
            ("--eta", self.eta > 0, "must be positive"),
            ("--tau-sq", self.tau_sq >= 0, "must be nonnegative"),
            ("--kappa", self.kappa is None or self.kappa > 0, "must be positive"),
            ("--n", self.n is None or self.n >= 1, "must be >= 1"),
        ]
        for flag, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{flag}: {msg}")
        if self.command in ("fit", "path", "select") and not self.data:
            raise ConfigError(f"--data: required for '{self.command}'")
        if self.command == "fit" and self.lam is None:
            raise ConfigError("--lambda: required for 'fit'")
        if self.command in ("experiment", "diagnose") and not self.config:
            raise ConfigError(f"--config: required for '{self.command}'")
        if self.c_xi_sweep is not None:
            _parse_sweep(self.c_xi_sweep)
        if self.command == "experiment" and not self.out_dir:
            raise ConfigError("--out-dir: required for 'experiment'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config: expected a JSON object")
        known = {f.name: f for f in fields(cls)}
        for key in obj:
            if key not in known:
                raise ConfigError(f"{key}: unknown key")
        kw = {}
        for key, value in obj.items():
            kw[key] = _coerce(key, value, cls.__dataclass_fields__[key].default)
        return cls(**kw)


def _parse_sweep(text: str):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--c-xi-sweep: expected comma-separated numbers, got {text!r}") from None
    if not values or any(not (v >= 0 and math.isfinite(v)) for v in values):
        raise ConfigError("--c-xi-sweep: needs at least one finite nonnegative value")
    return values


def _coerce(key, value, default):
    """Type-check a JSON value against the field default (None defaults accept numbers or strings)."""
    if value is None:
        if default is not None:
            raise ConfigError(f"{key}: null is not allowed")
        return None
    kind = type(default)
    if key in ("data", "groups_file", "config", "out", "out_dir", "command", "family", "reg", "c_xi_sweep"):
        kind = str
    elif key in ("group_size", "n", "threads"):
        kind = int
    elif key in ("lam", "psi_budget", "kappa"):
        kind = float
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps unset flags out of the namespace so they don't clobber --run-config
    p = argparse.ArgumentParser(
        prog="structured-gic",
        description="Model selection for structured sparsity via a generalized information criterion.",
        argument_default=argparse.SUPPRESS,
    )
    p.add_argument("command", choices=COMMANDS, help="what to run")
    p.add_argument("--run-config", dest="run_config", metavar="JSON",
                   help="load all options from a run-config JSON; explicit flags override it")
    io_ = p.add_argument_group("input/output")
    io_.add_argument("--data", help="tabular CSV (header x1..xp,y) or matrix-regression JSON")
    io_.add_argument("--family", choices=("gaussian", "logistic"), help="loss family for tabular data")
    io_.add_argument("--out", help="write the main output (path CSV, or JSON for fit/diagnose) to this file")
    io_.add_argument("--out-dir", dest="out_dir", help="write all outputs into this directory instead of stdout")
    io_.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    io_.add_argument("--verbose", action="store_true", help="info logging; per-replicate CSV for experiments")
    io_.add_argument("--threads", type=int, help="worker processes for experiments (env STRUCTURED_GIC_THREADS wins)")
    m = p.add_argument_group("model")
    m.add_argument("--reg", choices=REGULARIZERS, help="regularizer; auto picks nuclear for matrix data, "
                   "group when groups are given, else l1")
    m.add_argument("--groups-file", dest="groups_file", help="JSON list of groups (0-based column indices)")
    m.add_argument("--group-size", dest="group_size", type=int, help="contiguous groups of this size")
    m.add_argument("--lambda", dest="lam", type=float, help="regularization level for 'fit'")
    m.add_argument("--k-grid", dest="k_grid", type=int, help="number of path points (default 50)")
    m.add_argument("--ratio", type=float, help="lambda_min / lambda_max on the path (default 1e-3)")
    m.add_argument("--c-gic", dest="c_gic", type=float, help="GIC penalty constant (default 1)")
    m.add_argument("--log-n", dest="log_n", action="store_true", help="multiply the GIC rate by log n")
    m.add_argument("--c-xi", dest="c_xi", type=float, help="extraction threshold xi = c_xi * lambda (default 0.5)")
    m.add_argument("--c-xi-sweep", dest="c_xi_sweep", metavar="LIST",
                   help="select: also report the selection for each c_xi in a comma-separated list")
    m.add_argument("--psi-budget", dest="psi_budget", type=float, help="cap on psi^2 (default min(p, n)/2)")
    m.add_argument("--max-iter", dest="max_iter", type=int, help="solver iteration cap (default 5000)")
    m.add_argument("--tol-kkt", dest="tol_kkt", type=float, help="solver KKT tolerance (default 1e-7)")
    e = p.add_argument_group("experiment / diagnose")
    e.add_argument("--config", help="experiment JSON (kind, design, n_values, replicates, master_seed, selector)")
    e.add_argument("--n", type=int, help="diagnose: sample size override")
    e.add_argument("--seed", type=int, help="diagnose: seed for the curvature probe")
    e.add_argument("--kappa", type=float, help="diagnose: curvature hypothesis (default Hessian heuristic)")
    e.add_argument("--tau-sq", dest="tau_sq", type=float, help="diagnose: curvature tolerance hypothesis")
    e.add_argument("--eta", type=float, help="diagnose: curvature radius hypothesis")
    e.add_argument("--rsc-trials", dest="rsc_trials", type=int, help="diagnose: curvature probe draws")
    return p


def parse_config(argv) -> RunConfig:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise ConfigError("invalid command line (see --help)") from None
    opts = vars(ns)
    base = {}
    path = opts.pop("run_config", None)
    if path:
        try:
            base = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--run-config: cannot read {path}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("--run-config: expected a JSON object")
    return RunConfig.from_dict({**base, **opts})


def resolve_threads(cfg: RunConfig) -> int:
    env = os.environ.get("STRUCTURED_GIC_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"STRUCTURED_GIC_THREADS: expected an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError("STRUCTURED_GIC_THREADS: must be >= 1")
        return value
    return cfg.threads or os.cpu_count() or 1


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


def load_problem(cfg: RunConfig):
    path = Path(cfg.data)
    if not path.is_file():
        raise ConfigError(f"--data: no such file {path}")
    if path.suffix.lower() == ".json":
        if cfg.family != "gaussian":
            raise ConfigError("--family: matrix-regression data are gaussian only")
        data = read_matrix_json(path)
    else:
        data = read_csv_dataset(path, cfg.family)
    L = LossProblem(data)
    return L, _regularizer(cfg, L)


def _regularizer(cfg: RunConfig, L: LossProblem):
    reg = cfg.reg
    if reg == "auto":
        if len(L.shape) == 2:
            reg = "nuclear"
        elif cfg.groups_file or cfg.group_size:
            reg = "group"
        else:
            reg = "l1"
    if reg == "nuclear":
        if len(L.shape) != 2:
            raise ConfigError("--reg: nuclear needs matrix-regression data (a .json --data file)")
        return Nuclear(L.shape)
    if len(L.shape) != 1:
        raise ConfigError(f"--reg: {reg} needs tabular data, got matrix parameters of shape {L.shape}")
    p = L.shape[0]
    if reg == "l1":
        return GroupL2(GroupPartition.singletons(p))
    if cfg.groups_file:
        return GroupL2(_read_groups(cfg.groups_file, p))
    if cfg.group_size:
        if p % cfg.group_size:
            raise ConfigError(f"--group-size: {cfg.group_size} does not divide p = {p}")
        return GroupL2(GroupPartition.equal(p // cfg.group_size, cfg.group_size))
    raise ConfigError("--groups-file: group regularizer needs --groups-file or --group-size")


def _read_groups(path, p: int) -> GroupPartition:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--groups-file: cannot read {path}: {exc}") from None
    if isinstance(obj, dict):
        obj = obj.get("groups")
    if not isinstance(obj, list) or not all(isinstance(g, list) for g in obj):
        raise ConfigError(f"--groups-file: {path} must hold a list of groups (lists of column indices)")
    try:
        part = GroupPartition(tuple(tuple(g) for g in obj))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"--groups-file: {path}: {exc}") from None
    if part.p != p:
        raise ConfigError(f"--groups-file: {path} covers {part.p} columns, data have p = {p}")
    return part


def _solve_opts(cfg: RunConfig) -> SolveOptions:
    return SolveOptions(max_iter=cfg.max_iter, tol_kkt=cfg.tol_kkt)


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _round(obj):
    """Round floats to 12 significant digits so JSON outputs diff cleanly."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    if isinstance(obj, np.generic):
        return _round(obj.item())
    if isinstance(obj, float):
        return float(f"{obj:.12g}") if math.isfinite(obj) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _emit(cfg: RunConfig, name: str, text: str, stdout: bool = True, primary: bool = False) -> None:
    if primary and cfg.out:
        Path(cfg.out).write_text(text)
        log.info("wrote %s", cfg.out)
        if not cfg.out_dir:
            return
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
        log.info("wrote %s", out / name)
    elif stdout:
        sys.stdout.write(text)


def _support_cell(S) -> str:
    return ";".join(str(g) for g in S)


def path_rows(sel: PathSelection):
    rows = []
    for i, (pt, res, st) in enumerate(zip(sel.points, sel.results, sel.status)):
        rows.append([
            pt.lam, pt.kkt, pt.M.size,
            None if res is None else res.loss,
            None if res is None else res.psi_sq,
            None if res is None else res.a_n,
            None if res is None else res.gic,
            i == sel.index, st,
        ])
    return rows


def _model_record(sel: PathSelection) -> dict:
    if sel.index is None:
        return {"model": None, "lambda_hat": None, "status": "no eligible path point"}
    res = sel.selected
    return {
        "model": subspace_to_json(sel.model),
        "lambda_hat": sel.lambda_hat,
        "loss": res.loss,
        "psi_sq": res.psi_sq,
        "a_n": res.a_n,
        "gic": res.gic,
        "status": "ok",
    }


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> int:
    L, reg = load_problem(cfg)
    sol = solve_regularized(L, reg, cfg.lam, opts=_solve_opts(cfg))
    M = extract_model(sol.theta, reg, xi_n(cfg.lam, cfg.c_xi))
    out = {
        "lambda": cfg.lam,
        "kkt": sol.kkt,
        "converged": sol.converged,
        "n_iter": sol.n_iter,
        "objective": sol.objective,
        "model": subspace_to_json(M),
        "theta": sol.theta,
    }
    _emit(cfg, "fit.json", dumps(out), primary=True)
    if not sol.converged:
        log.error("solver stopped at max_iter with KKT residual %.3g", sol.kkt)
        return EXIT_NUMERIC
    return EXIT_OK


def _run_path(cfg: RunConfig, c_xi: float = None, problem=None):
    L, reg = problem or load_problem(cfg)
    grid = lambda_grid(L, reg, cfg.k_grid, cfg.ratio)
    schedule = schedule_for(L, reg, cfg.c_gic, cfg.log_n)
    c_xi = cfg.c_xi if c_xi is None else c_xi
    sel = select_on_path(L, reg, grid, schedule, c_xi, _solve_opts(cfg), cfg.psi_budget)
    bad = sum(st != "ok" for st in sel.status)
    if bad:
        log.warning("%d of %d path points are not eligible for selection", bad, len(sel.status))
    return L, reg, schedule, sel


def cmd_path(cfg: RunConfig) -> int:
    _, _, _, sel = _run_path(cfg)
    text = _csv_text(PATH_COLUMNS, path_rows(sel))
    if cfg.out or cfg.out_dir:
        _emit(cfg, "path.csv", text, primary=True)
        if cfg.out_dir:
            _emit(cfg, "model.json", dumps(_model_record(sel)))
    if cfg.json:
        rows = [dict(zip(PATH_COLUMNS, r)) for r in path_rows(sel)]
        sys.stdout.write(dumps({"path": rows, **_model_record(sel)}))
    elif not (cfg.out or cfg.out_dir):
        sys.stdout.write(text)
    return EXIT_OK if sel.index is not None else EXIT_NUMERIC


def cmd_select(cfg: RunConfig) -> int:
    L, reg, schedule, sel = _run_path(cfg)
    record = _model_record(sel)
    table = None
    if isinstance(reg, GroupL2) and reg.partition.G <= EXHAUSTIVE_MAX_GROUPS:
        budget = default_psi_budget(L) if cfg.psi_budget is None else cfg.psi_budget
        cands = [M for M in all_group_supports(reg.partition) if M.size <= budget]
        M_ex, results = select_exhaustive(L, cands, schedule, budget)
        table = [[_support_cell(M.S), M.size, r.loss, r.psi_sq, r.a_n, r.gic, M == M_ex]
                 for M, r in zip(cands, results)]
        record["exhaustive_model"] = subspace_to_json(M_ex)
        record["agrees_with_exhaustive"] = sel.model is not None and sel.model == M_ex
    sweep = None
    if cfg.c_xi_sweep is not None:
        sweep = []
        for c in _parse_sweep(cfg.c_xi_sweep):
            s_sel = _run_path(cfg, c, (L, reg))[3]
            M = s_sel.model
            sweep.append([c, s_sel.lambda_hat, None if M is None else M.size,
                          None if M is None else s_sel.selected.gic,
                          "" if not isinstance(M, GroupSupport) else _support_cell(M.S)])
    if cfg.out or cfg.out_dir:
        _emit(cfg, "path.csv", _csv_text(PATH_COLUMNS, path_rows(sel)), stdout=False, primary=True)
    if cfg.out_dir:
        _emit(cfg, "model.json", dumps(record))
        if table is not None:
            _emit(cfg, "exhaustive.csv", _csv_text(EXHAUSTIVE_COLUMNS, table))
        if sweep is not None:
            _emit(cfg, "sweep.csv", _csv_text(SWEEP_COLUMNS, sweep))
    if cfg.json:
        if table is not None:
            record = {**record, "exhaustive": [dict(zip(EXHAUSTIVE_COLUMNS, row)) for row in table]}
        if sweep is not None:
            record = {**record, "sweep": [dict(zip(SWEEP_COLUMNS, row)) for row in sweep]}
        sys.stdout.write(dumps(record))
    elif not cfg.out_dir:
        sys.stdout.write(_select_text(sel, record, table, sweep))
    return EXIT_OK if sel.index is not None else EXIT_NUMERIC


def _select_text(sel: PathSelection, record: dict, table, sweep=None) -> str:
    lines = []
    if sel.index is None:
        lines.append("selected: none (no eligible path point)")
    else:
        M = sel.model
        what = f"S={_support_cell(M.S) or '-'}" if isinstance(M, GroupSupport) else f"rank={M.r}"
        lines.append(f"selected: {what} lambda={fmt(record['lambda_hat'])} gic={fmt(record['gic'])}")
    if table is not None:
        S_ex = record["exhaustive_model"]["S"]
        lines.append(f"exhaustive: S={_support_cell(S_ex) or '-'}")
        lines.append(_csv_text(EXHAUSTIVE_COLUMNS, table).rstrip("\n"))
    if sweep is not None:
        lines.append("c_xi sweep:")
        lines.append(_csv_text(SWEEP_COLUMNS, sweep).rstrip("\n"))
    return "\n".join(lines) + "\n"


def _load_experiment(cfg: RunConfig) -> McConfig:
    try:
        obj = json.loads(Path(cfg.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--config: cannot read {cfg.config}: {exc}") from None
    return McConfig.from_dict(obj)


def cmd_experiment(cfg: RunConfig) -> int:
    mc = _load_experiment(cfg)
    threads = resolve_threads(cfg)
    log.info("running %d replicates on %d worker(s)", mc.replicates * len(mc.n_values), threads)
    report = monte_carlo(mc, threads)
    report.write(cfg.out_dir, cfg.verbose)
    failures = sum(r.failures for r in report.rows)
    if cfg.json:
        sys.stdout.write(dumps({"rows": [asdict(r) for r in report.rows]}))
    if failures:
        log.error("%d replicate(s) failed; see report.json", failures)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig) -> int:
    mc = _load_experiment(cfg)
    design = mc.design if cfg.n is None else replace(mc.design, n=cfg.n)
    inst = gen_group_glm(design) if mc.kind == "group" else gen_lowrank(design)
    L = LossProblem(inst.data)
    reg = regularizer_for(inst.M_star)
    sel_cfg = mc.selector
    schedule = schedule_for(L, reg, sel_cfg.c_gic, sel_cfg.log_n)
    grid = lambda_grid(L, reg, sel_cfg.k_grid, sel_cfg.ratio)
    opts = SolveOptions(max_iter=sel_cfg.max_iter, tol_kkt=sel_cfg.tol_kkt)
    sel = select_on_path(L, reg, grid, schedule, sel_cfg.c_xi, opts, sel_cfg.psi_budget)
    rep = check_assumptions(inst, cfg.kappa, cfg.tau_sq, cfg.eta, schedule, sel.lambda_hat,
                            sel_cfg.psi_budget, M_hat=sel.model, rsc_trials=cfg.rsc_trials, seed=cfg.seed)
    angle_tol = 1e-6 if mc.kind == "lowrank" and design.noise_sd == 0 else None
    out = {
        "n": design.n,
        "assumptions": rep.to_dict(),
        "truth": subspace_to_json(inst.M_star),
        **_model_record(sel),
        "recovered": sel.model is not None and same_subspace(sel.model, inst.M_star, angle_tol),
    }
    _emit(cfg, "diagnose.json", dumps(out), primary=True)
    return EXIT_OK if sel.index is not None else EXIT_NUMERIC


HANDLERS = {
    "fit": cmd_fit,
    "path": cmd_path,
    "select": cmd_select,
    "experiment": cmd_experiment,
    "diagnose": cmd_diagnose,
}


def run(cfg: RunConfig) -> int:
    """Execute a validated run config and return the exit status."""
    try:
        return HANDLERS[cfg.command](cfg)
    except (ConfigError, InvalidShape, PsiBudgetExceeded) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NotConverged, DegenerateData, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "--verbose" in argv
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
