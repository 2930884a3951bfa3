"""Command-line front end: convergence tables and stability diagnostics."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import diagnostics as dg
from .assembly import PATTERNS, RULES, assemble_load, build_background_mesh
from .domain import DomainError, generate_nodal_set
from .envelope import NodalFunction, build_envelope
from .norms import (
    NINE_POINT,
    ErrorReport,
    ErrorRow,
    h1_error,
    h1_interp_error,
    linf_error,
    rates,
    w2p_ninepoint,
    w2p_table,
    w2p_weighted,
)
from .problems import get_problem
from .solver import ConvergenceError, SolverConfig, solve

log = logging.getLogger("opma")

NORM_VARIANTS = ("table", "ninepoint", "weighted")
H1_VARIANTS = ("interp", "norm", "seminorm")
FORMATS = ("csv", "markdown")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    example: str = "1"
    levels: int = 7
    h0: float = 1.0
    h_list: tuple = ()  # explicit h values; overrides levels/h0
    tol: float = 1e-10
    method: str = "newton"
    max_iter: int = 200
    norm_variant: str = "table"
    h1: str = "interp"
    mesh: str = "diagonal"
    quadrature: str = "centroid"
    refine: int = 0
    format: str = "markdown"
    out: str | None = None
    eps: tuple = (0.1, 0.5, 0.9, 1.0)
    rtest: float = 3.0
    shrink: float = 0.5  # diagnostics: v_h solves with loads (1 - shrink h^2) f
    offset: tuple = (0.0, 0.0)
    dump_mesh: str | None = None
    workers: int = 1
    verbose: bool = False

    def __post_init__(self):
        get_problem(self.example)  # raises KeyError on unknown names
        if self.levels < 1:
            raise ConfigError("need at least one level")
        if not self.h0 > 0:
            raise ConfigError("h0 must be positive")
        hs = self.hs()
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ConfigError("levels must be strictly decreasing in h")
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigError(f"unknown norm variant {self.norm_variant!r}")
        if self.h1 not in H1_VARIANTS:
            raise ConfigError(f"unknown H1 variant {self.h1!r}")
        if self.mesh not in PATTERNS:
            raise ConfigError(f"unknown mesh pattern {self.mesh!r}")
        if self.quadrature not in RULES:
            raise ConfigError(f"unknown quadrature {self.quadrature!r}")
        if self.format not in FORMATS:
            raise ConfigError(f"unknown format {self.format!r}")
        if self.refine < 0 or self.workers < 1:
            raise ConfigError("refine must be >= 0 and workers >= 1")
        if any(not (0 < e <= 1) for e in self.eps):
            raise ConfigError("eps values must lie in (0, 1]")
        if not self.rtest > 0:
            raise ConfigError("rtest must be positive")
        self.solver_config()  # validates tol, method, max_iter

    def hs(self) -> list:
        if self.h_list:
            return [float(h) for h in self.h_list]
        return [self.h0 / 2**k for k in range(self.levels)]

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig(residual_tol=self.tol, method=self.method, max_newton=self.max_iter, max_sweeps=self.max_iter)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# -- one level -----------------------------------------------------------------


@dataclass
class LevelResult:
    h: float
    row: ErrorRow | None
    iterations: int = 0
    residual: float = math.nan
    wall_time: float = 0.0
    error: str | None = None
    history: list = field(default_factory=list)


def discretize(problem, h, cfg: RunConfig):
    nodes = generate_nodal_set(problem.domain, h, cfg.offset)
    mesh = build_background_mesh(nodes, cfg.mesh)
    loads = assemble_load(mesh, problem.f, problem.singular_curves, refine_levels=cfg.refine, rule=cfg.quadrature)
    return nodes, loads


def level_errors(problem, u_h: NodalFunction, loads, cfg: RunConfig) -> ErrorRow:
    """L-infinity, H^1, W^2_1 and W^2_2 errors of ``u_h`` against the exact solution."""
    nodes = u_h.nodes
    env = build_envelope(u_h)
    exact = NodalFunction.interpolate(nodes, problem.exact)
    linf = linf_error(exact, u_h)
    if cfg.h1 == "interp":
        h1 = h1_interp_error(problem.exact, u_h, env, seminorm=True)
    else:
        h1 = h1_error(problem.exact, problem.grad, u_h, env, seminorm=cfg.h1 == "seminorm")
    w2 = []
    for p in (1, 2):
        if cfg.norm_variant == "table":
            w2.append(w2p_table(problem.exact, nodes, p, minus=u_h, env=env))
        elif cfg.norm_variant == "ninepoint":
            w2.append(w2p_ninepoint(problem.exact, nodes, p, minus=u_h, weight="none", env=env))
        else:
            diff = exact - u_h
            w2.append(sum(w2p_weighted(diff, loads, e, p, nodes) ** p for e in NINE_POINT) ** (1 / p))
    return ErrorRow(h=nodes.h, linf=linf, h1=h1, w21=w2[0], w22=w2[1])


def run_level(problem_name: str, h: float, cfg: RunConfig, dump: str | None = None) -> LevelResult:
    problem = get_problem(problem_name)
    nodes, loads = discretize(problem, h, cfg)
    try:
        u_h, stats = solve(nodes, loads, problem.g, cfg.solver_config())
    except ConvergenceError as exc:
        return LevelResult(h, None, error=str(exc), history=exc.history)
    if dump:
        build_envelope(u_h).write_off(dump)
    row = level_errors(problem, u_h, loads, cfg)
    return LevelResult(h, row, stats.sweeps, stats.residual, stats.wall_time)


def _map_levels(fn, args, workers):
    """Apply ``fn`` to each argument tuple, results in input order."""
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


# -- convergence study -----------------------------------------------------------


class StudyAborted(RuntimeError):
    def __init__(self, msg, results):
        super().__init__(msg)
        self.results = results


def run_convergence(cfg: RunConfig, stream=None):
    """Solve every level, compute errors and rates, and write the table.

    Returns ``(ErrorReport, level results)``.  If some level fails to
    converge the table of the levels before it is still written and
    ``StudyAborted`` is raised.
    """
    hs = cfg.hs()
    problem = get_problem(cfg.example)
    if problem.exact is None:
        raise ConfigError(f"problem {cfg.example} has no exact solution")
    args = [(cfg.example, h, cfg, cfg.dump_mesh if k == len(hs) - 1 else None) for k, h in enumerate(hs)]
    results = _map_levels(run_level, args, cfg.workers)
    good = []
    for res in results:
        if res.row is None:
            break
        good.append(res)
        log.info("h=%g: %d iterations, residual %.2e, %.1f s", res.h, res.iterations, res.residual, res.wall_time)
    rows = [r.row for r in good]
    report = rates(rows) if len(rows) >= 2 else ErrorReport(rows, {c: [] for c in ErrorReport.COLUMNS})
    if stream is not None:
        stream.write(format_table(report, cfg.format))
    if len(good) < len(results):
        bad = results[len(good)]
        tail = ", ".join(f"{r:.2e}" for r in bad.history[-5:])
        raise StudyAborted(f"solver did not converge at h={bad.h:g}: {bad.error} (last residuals: {tail})", results)
    return report, results


def _h_label(h: float) -> str:
    fr = Fraction(h).limit_denominator(1 << 20)
    if float(fr) == h and fr.numerator == 1:
        return "1" if fr.denominator == 1 else f"1/{fr.denominator}"
    return f"{h:g}"


def _fmt_err(x: float) -> str:
    return f"{x:.2e}"


def _fmt_rate(r) -> str:
    return "" if r is None or not math.isfinite(r) else f"{r:.2f}"


HEADER = ("h", "Linf", "rate", "H1", "rate", "W21", "rate", "W22", "rate")


def _table_cells(report: ErrorReport, full: bool):
    out = []
    for k, row in enumerate(report.rows):
        cells = [repr(row.h) if full else _h_label(row.h)]
        for col in ErrorReport.COLUMNS:
            val = getattr(row, col)
            r = report.rates[col][k - 1] if k > 0 else None
            if full:
                cells += [repr(float(val)), "" if r is None or not math.isfinite(r) else repr(float(r))]
            else:
                cells += [_fmt_err(val), _fmt_rate(r)]
        out.append(cells)
    return out


def format_table(report: ErrorReport, fmt: str = "markdown") -> str:
    """The error table in the layout ``h, Linf, rate, H1, rate, W21, rate, W22, rate``.

    Markdown rounds errors to 3 significant digits and rates to 2 decimals;
    CSV keeps full precision.
    """
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        w.writerows(_table_cells(report, full=True))
        return buf.getvalue()
    lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    for cells in _table_cells(report, full=False):
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- diagnostics ---------------------------------------------------------------

DIAG_HEADER = (
    "h",
    "eps",
    "tau",
    "n_interior",
    "n_contact",
    "n_upper_contact",
    "n_noncontact",
    "mu_S",
    "mu_C",
    "nu_C",
    "rhs_nu",
    "rhs_norm",
    "measure_ok",
    "second_diff_violations",
    "containment_ok",
)
DECAY_HEADER = ("h", "interior_defect", "boundary_defect", "boundary_defect_over_h2")


def diagnose_level(problem_name: str, h: float, cfg: RunConfig) -> list:
    problem = get_problem(problem_name)
    nodes, loads = discretize(problem, h, cfg)
    shrink = min(cfg.shrink * h * h, 0.5)
    u_h, v_h = dg.comparison_pair(nodes, loads, problem.g, shrink, cfg.solver_config())
    rows = []
    for eps in cfg.eps:
        rep = dg.contact_sets(u_h, v_h, eps)
        mb = dg.check_measure_bound(rep)
        viol = dg.check_second_diff_bounds(rep)
        S = set(rep.noncontact.tolist())
        upper_S = set(range(nodes.n_interior)) - set(rep.upper_contact.tolist())
        contained = set(dg.large_difference_set(rep).tolist()) <= S and set(
            dg.large_difference_set(rep, upper=True).tolist()
        ) <= upper_S
        rows.append(
            [
                h,
                eps,
                rep.tau,
                nodes.n_interior,
                len(rep.contact),
                len(rep.upper_contact),
                len(rep.noncontact),
                rep.mu_S,
                rep.mu_C,
                rep.nu_C,
                mb.rhs_nu,
                mb.rhs_norm,
                mb.ok,
                len(viol),
                contained,
            ]
        )
    return rows


def _cell(v, full):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        return "inf" if v > 0 else "nan"
    return repr(v) if full else f"{v:.2e}"


def _emit(header, rows, fmt):
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v, True) for v in r])
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        # first column is h
        lines.append("| " + " | ".join([_h_label(r[0])] + [_cell(v, False) for v in r[1:]]) + " |")
    return "\n".join(lines) + "\n"


def run_diagnostics(cfg: RunConfig, stream=None):
    """Contact-set diagnostics per (level, eps) followed by the consistency
    decay table.  Returns ``(rows, DecayTable)``."""
    problem = get_problem(cfg.example)
    if problem.exact is None:
        raise ConfigError(f"problem {cfg.example} has no exact solution")
    hs = cfg.hs()
    per_level = _map_levels(diagnose_level, [(cfg.example, h, cfg) for h in hs], cfg.workers)
    rows = [r for level in per_level for r in level]
    decay = dg.consistency_decay(
        problem, hs, r_test=cfg.rtest, offset=cfg.offset, mesh=cfg.mesh, rule=cfg.quadrature, refine_levels=cfg.refine
    )
    if stream is not None:
        stream.write(_emit(DIAG_HEADER, rows, cfg.format))
        stream.write("\n")
        drows = [[r.h, r.interior, r.boundary, c] for r, c in zip(decay.rows, decay.boundary_constants)]
        stream.write(_emit(DECAY_HEADER, drows, cfg.format))
        if cfg.format == "markdown":
            stream.write(f"\ninterior defect slope (dist >= {cfg.rtest:g} h): {decay.interior_slope:.2f}\n")
    return rows, decay


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _float_list(s: str) -> tuple:
    try:
        return tuple(float(Fraction(x.strip())) for x in s.split(",") if x.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad number list {s!r}") from exc


def _point(s: str) -> tuple:
    vals = _float_list(s)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("offset must be X,Y")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="opma", description="Oliker-Prussner solver for det D^2 u = f with convergence tables and diagnostics.")
    p.add_argument("command", nargs="?", choices=("convergence", "diagnostics"), default="convergence")
    p.add_argument("--config", help="key=value file with defaults for any flag")
    p.add_argument("--example", default="1", help="1, 2, 3 or quadratic")
    p.add_argument("--levels", type=int, default=7, help="number of levels h0, h0/2, ...")
    p.add_argument("--h0", type=float, default=1.0, help="coarsest mesh size")
    p.add_argument("--h-list", type=_float_list, default=(), help="explicit comma separated h values, e.g. 1/8,1/16")
    p.add_argument("--tol", type=float, default=1e-10, help="relative residual tolerance")
    p.add_argument("--method", choices=("newton", "perron"), default="newton")
    p.add_argument("--max-iter", type=int, default=200, help="Newton steps or Perron sweeps")
    p.add_argument("--norm-variant", choices=NORM_VARIANTS, default="table")
    p.add_argument("--h1", choices=H1_VARIANTS, default="interp")
    p.add_argument("--mesh", choices=PATTERNS, default="diagonal", help="background triangulation for the loads")
    p.add_argument("--quadrature", choices=tuple(RULES), default="centroid")
    p.add_argument("--refine", type=int, default=0, help="refinements of triangles cut by singular curves")
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--eps", type=_float_list, default=(0.1, 0.5, 0.9, 1.0), help="diagnostic eps list")
    p.add_argument("--rtest", type=float, default=3.0, help="interior radius in units of h for consistency")
    p.add_argument("--shrink", type=float, default=0.5, help="diagnostics: comparison loads are (1 - shrink h^2) f")
    p.add_argument("--offset", type=_point, default=(0.0, 0.0), help="lattice offset X,Y")
    p.add_argument("--dump-mesh", help="write the finest envelope mesh as OFF")
    p.add_argument("--workers", type=int, default=1, help="levels solved in parallel")
    p.add_argument("--verbose", action="store_true")
    return p


_CONVERTERS = {
    "levels": int,
    "h0": float,
    "h_list": _float_list,
    "tol": float,
    "max_iter": int,
    "refine": int,
    "eps": _float_list,
    "rtest": float,
    "shrink": float,
    "offset": _point,
    "workers": int,
}


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; keys use flag names."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key == "verbose":
                out[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = _CONVERTERS.get(key, str)(val)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return out


def parse_args(argv=None):
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        parser.set_defaults(**read_config_file(pre.config))
    ns = parser.parse_args(argv)
    kw = {f.name: getattr(ns, f.name) for f in fields(RunConfig)}
    try:
        cfg = RunConfig(**kw)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    return ns.command, cfg


def main(argv=None) -> int:
    try:
        command, cfg = parse_args(argv)
    except ConfigError as exc:
        print(f"opma: configuration error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if cfg.verbose else logging.WARNING, format="%(message)s")
    if cfg.verbose:
        logging.getLogger("opma").setLevel(logging.INFO)
        log.info("config: %s", asdict(cfg))
    out = open(cfg.out, "w", encoding="utf-8", newline="") if cfg.out else sys.stdout
    try:
        if command == "convergence":
            run_convergence(cfg, out)
        else:
            run_diagnostics(cfg, out)
    except StudyAborted as exc:
        print(f"opma: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        tail = ", ".join(f"{r:.2e}" for r in exc.history[-5:])
        print(f"opma: {exc} (last residuals: {tail})", file=sys.stderr)
        return 2
    except (ConfigError, DomainError) as exc:
        print(f"opma: configuration error: {exc}", file=sys.stderr)
        return 1
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
