"""Command-line front end: ``snsot gen | solve | bench``.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
Setting ``OT_SNS_THREADS`` caps the BLAS thread pools for the whole run.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, sinkhorn, sparse_newton
from .core import (
    DualPotentials,
    LogPlan,
    Problem,
    SolverConfig,
    Trace,
    TraceRecord,
    ValidationError,
    l1_marginal_error,
    marginal_kl,
    transport_cost,
    validate,
)
from .problems import (
    DEFAULT_SMOOTHING,
    ParseError,
    gen_random_assignment,
    image_pair_problem,
    load_image,
    load_problem,
    save_problem,
)
from .sparse_newton import ConjugateGradientError

log = logging.getLogger("snsot")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SOLVERS = ("sinkhorn", "sns", "newton-dense", "lbfgs")
THREADS_ENV = "OT_SNS_THREADS"
BENCH_COLUMNS = ("solver", "eta", "total_seconds", "total_iterations", "newton_iterations",
                 "final_marginal_kl", "status")

NUMERIC_ERRORS = (FloatingPointError, ConjugateGradientError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def parse_sparsity(text: str, n: int) -> float:
    """``"2/n"`` -> ``2/n``; plain numbers and fractions like ``"1/50"`` also work."""
    t = text.strip().replace(" ", "")
    try:
        if t.endswith("/n"):
            value = float(Fraction(t[:-2])) / n
        else:
            value = float(Fraction(t))
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"cannot parse target sparsity {text!r} (use e.g. 0.02 or 2/n)") from None
    if not 0.0 < value <= 1.0:
        raise UsageError(f"target sparsity {text!r} = {value} outside (0, 1] for n={n}")
    if value * n * n < 1:
        raise UsageError(f"target sparsity {text!r} keeps no entry of a {n}x{n} plan")
    return value


def parse_float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


class CsvTrace(Trace):
    """Trace that also appends every row to a CSV file and flushes it."""

    def __init__(self, fh):
        super().__init__()
        self._fh = fh
        self._writer = csv.writer(fh, lineterminator="\n")
        self._writer.writerow(TraceRecord.CSV_COLUMNS)
        fh.flush()

    def emit(self, record):
        super().emit(record)
        self._writer.writerow(record.csv_row())
        self._fh.flush()


@dataclass
class Outcome:
    duals: DualPotentials
    trace: Trace
    fallbacks: int


def stage_summary(trace: Trace) -> dict:
    """Per-stage iteration counts and wall seconds, in stage order."""
    out, start = {}, 0.0
    for rec in trace.records:
        entry = out.setdefault(rec.stage, {"iterations": 0, "seconds": 0.0, "_start": start})
        entry["iterations"] += 1
        entry["seconds"] = rec.elapsed_seconds - entry["_start"]
        start = rec.elapsed_seconds
    for entry in out.values():
        del entry["_start"]
    return out


def run_solver(name: str, problem: Problem, config: SolverConfig, trace: Trace,
               sinkhorn_max_iters: int, memory: int) -> Outcome:
    z0 = DualPotentials.zeros(problem.n)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            if name == "sinkhorn":
                z = sinkhorn.run(problem, z0, sinkhorn_max_iters, trace,
                                 stop_kl=config.stop_marginal_kl, stop_l1=config.stop_l1)
            else:
                warm = sinkhorn.run(problem, z0, config.n1, trace)
                if name == "sns":
                    z = sparse_newton.run(problem, warm, config, trace)
                elif name == "newton-dense":
                    z = baselines.run_dense_newton(problem, warm, config, trace)
                else:
                    z = baselines.run_lbfgs(problem, warm, memory, config, trace)
    except NUMERIC_ERRORS as exc:
        raise NumericalFailure(str(exc)) from exc
    if trace.records and not np.isfinite(trace.records[-1].potential_value):
        raise NumericalFailure("potential became non-finite")
    fallbacks = sum(1 for r in trace.records if r.step_size == 0.0)
    return Outcome(z, trace, fallbacks)


def build_config(args, n: int) -> SolverConfig:
    try:
        return SolverConfig(
            n1=args.n1,
            n2=args.n2,
            target_sparsity=parse_sparsity(args.target_sparsity, n),
            cg_rel_tol=args.cg_rel_tol,
            cg_max_iters=args.cg_max_iters,
            stop_marginal_kl=args.stop_kl,
            stop_l1=args.stop_l1,
            jacobi=args.jacobi,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def read_problem(path) -> Problem:
    try:
        problem = load_problem(path)
        validate(problem)
    except (OSError, ParseError, ValidationError) as exc:
        raise OSError(str(exc)) from exc
    return problem


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    if args.kind == "random-assignment":
        if args.n is None:
            raise UsageError("--kind random-assignment requires --n")
        if args.n < 1:
            raise UsageError("--n must be >= 1")
        problem = gen_random_assignment(args.n, args.seed, args.eta)
    else:
        if not (args.img_a and args.img_b):
            raise UsageError("--kind image-pair requires --img-a and --img-b")
        try:
            a, b = load_image(args.img_a), load_image(args.img_b)
        except (ParseError, ValueError) as exc:
            raise OSError(str(exc)) from exc
        try:
            problem = image_pair_problem(a, b, args.metric, args.eta, args.smoothing)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    header = save_problem(problem, args.out)
    print(f"wrote {header} (n={problem.n}, eta={problem.eta:g})")
    return EXIT_OK


def _output_paths(args, problem_path: Path) -> tuple:
    stem = problem_path.name
    for suffix in (".otp.json", ".json"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    base = Path(args.out_dir) if args.out_dir else problem_path.parent
    prefix = f"{stem}.{args.solver}"
    return (
        Path(args.trace) if args.trace else base / f"{prefix}.trace.csv",
        Path(args.report) if args.report else base / f"{prefix}.report.json",
        base / f"{prefix}.duals.npz",
    )


def cmd_solve(args) -> int:
    problem_path = Path(args.problem)
    problem = read_problem(problem_path)
    if args.eta is not None:
        problem = problem.with_eta(args.eta)
    config = build_config(args, problem.n)
    trace_path, report_path, duals_path = _output_paths(args, problem_path)
    trace_path.parent.mkdir(parents=True, exist_ok=True)

    report = {
        "problem": str(problem_path),
        "n": problem.n,
        "eta": problem.eta,
        "solver": args.solver,
        "config": {
            **config.as_dict(),
            "cg_max_iters_resolved": config.cg_iters_for(problem.n),
            "target_sparsity_text": args.target_sparsity,
            "sinkhorn_max_iters": args.max_iters,
            "lbfgs_memory": args.memory,
            "threads": os.environ.get(THREADS_ENV),
        },
        "trace": str(trace_path),
    }
    status = "ok"
    error = None
    with open(trace_path, "w", newline="") as fh:
        trace = CsvTrace(fh)
        try:
            outcome = run_solver(args.solver, problem, config, trace, args.max_iters, args.memory)
        except NumericalFailure as exc:
            status, error, outcome = "failed", str(exc), None

    report["stages"] = stage_summary(trace)
    report["total_iterations"] = len(trace)
    report["status"] = status
    if outcome is not None:
        plan = LogPlan.from_duals(problem, outcome.duals)
        np.savez(duals_path, x=outcome.duals.x, y=outcome.duals.y)
        report.update(
            transport_cost=transport_cost(plan, problem),
            marginal_kl=marginal_kl(plan, problem),
            l1_marginal_error=l1_marginal_error(plan, problem),
            line_search_fallbacks=outcome.fallbacks,
            converged=bool(marginal_kl(plan, problem) <= config.stop_marginal_kl
                           or l1_marginal_error(plan, problem) <= config.stop_l1),
            duals=str(duals_path),
        )
    else:
        report["error"] = error
    _write_json(report_path, report)
    if outcome is None:
        print(f"error: numerical failure: {error} (partial trace in {trace_path})", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{args.solver}: {len(trace)} iterations, marginal_kl={report['marginal_kl']:.3e}, "
          f"transport_cost={report['transport_cost']:.12g}")
    print(f"report: {report_path}")
    return EXIT_OK


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, default=float) + "\n")
    os.replace(tmp, path)


def bench_cell(solver: str, problem: Problem, args) -> dict:
    row = {"solver": solver, "eta": problem.eta}
    try:
        config = build_config(args, problem.n)
        t0 = time.perf_counter()
        outcome = run_solver(solver, problem, config, Trace(), args.max_iters, args.memory)
        seconds = time.perf_counter() - t0
    except (NumericalFailure, UsageError) as exc:
        log.warning("%s at eta=%g failed: %s", solver, problem.eta, exc)
        row.update(total_seconds="", total_iterations="", newton_iterations="",
                   final_marginal_kl="", status="failed")
        return row
    records = outcome.trace.records
    newton = sum(1 for r in records if r.stage != "sinkhorn")
    row.update(
        total_seconds=repr(seconds),
        total_iterations=len(records),
        newton_iterations=newton,
        final_marginal_kl=repr(records[-1].marginal_kl) if records else "",
        status="ok",
    )
    return row


def cmd_bench(args) -> int:
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    unknown = [s for s in solvers if s not in SOLVERS]
    if unknown:
        raise UsageError(f"unknown solver(s) {', '.join(unknown)}; choose from {', '.join(SOLVERS)}")
    problems = [read_problem(p) for p in args.problems]
    etas = parse_float_list(args.etas) if args.etas else None
    if etas is not None and any(e <= 0 for e in etas):
        raise UsageError("every eta must be positive")
    out = open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)
    with out as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        fh.flush()
        for base in problems:
            for eta in etas if etas is not None else [base.eta]:
                problem = base.with_eta(eta)
                for solver in solvers:
                    writer.writerow(bench_cell(solver, problem, args))
                    fh.flush()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    d = SolverConfig()
    p.add_argument("--n1", type=int, default=d.n1, help="Sinkhorn warm-start iterations")
    p.add_argument("--n2", type=int, default=d.n2, help="maximum Newton (or L-BFGS) iterations")
    p.add_argument("--target-sparsity", default="1", metavar="LAMBDA",
                   help='kept fraction of Hessian entries, e.g. 0.02 or "2/n" (default 1)')
    p.add_argument("--stop-kl", type=float, default=d.stop_marginal_kl,
                   help="stop once the marginal KL divergence drops to this")
    p.add_argument("--stop-l1", type=float, default=d.stop_l1,
                   help="stop once the L1 marginal error drops to this")
    p.add_argument("--cg-rel-tol", type=float, default=d.cg_rel_tol)
    p.add_argument("--cg-max-iters", type=int, default=None,
                   help="conjugate gradient cap (default min(10n, 5000))")
    p.add_argument("--jacobi", action="store_true", help="Jacobi-preconditioned CG")
    p.add_argument("--max-iters", type=int, default=100_000,
                   help="iteration cap for --solver sinkhorn")
    p.add_argument("--memory", type=int, default=10, help="L-BFGS memory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snsot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a problem file")
    g.add_argument("--kind", choices=("random-assignment", "image-pair"), required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eta", type=float, default=1.0)
    g.add_argument("--img-a")
    g.add_argument("--img-b")
    g.add_argument("--metric", choices=("l1", "l2sq"), default="l2sq")
    g.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING)
    g.add_argument("--out", required=True, help="header path, e.g. r100.otp.json")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="run one solver on a problem file")
    s.add_argument("problem")
    s.add_argument("--solver", choices=SOLVERS, default="sns")
    s.add_argument("--eta", type=float, default=None, help="override the file's eta")
    _add_solver_flags(s)
    s.add_argument("--trace", help="trace CSV path")
    s.add_argument("--report", help="JSON report path")
    s.add_argument("--out-dir", help="directory for default output paths")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="solver x eta comparison table")
    b.add_argument("problems", nargs="+")
    b.add_argument("--solvers", default="sinkhorn,sns")
    b.add_argument("--etas", help="comma-separated eta values (default: each file's eta)")
    _add_solver_flags(b)
    b.add_argument("--out", help="CSV output path (default stdout)")
    b.set_defaults(func=cmd_bench)
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
