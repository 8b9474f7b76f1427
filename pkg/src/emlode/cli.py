"""Command-line front end: ``search``, ``cascade-bench`` and ``toybench``.

Every run writes CSV reports plus ``manifest.ini``, the resolved
configuration, which can be passed back with ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cascade import cascade_simulate, reservoir_grid_search
from .dataio import (
    EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE, EXIT_OK, GRAMMARS, SUBCOMMANDS,
    ConfigError, DataError, RunConfig, ingest_trace, load_config, safe_name,
    write_csv, write_manifest, write_trace_csv,
)
from .expr_core import EML, HILL, Block, Expression, GrammarConfig, R, enumerate_expressions
from .fitting import FitResult, Trace, derive_seed, fit_model
from .response_models import DOSE_ODE, EMBEDDINGS, ExpressionModel
from .selection import ModelReportRow, ScoreConfig, aic_bic, rank_models, report_row
from .toybench import benchmark_trace

log = logging.getLogger("emlode")


class InfeasibleError(RuntimeError):
    """Every candidate failed to fit (exit code 4)."""


# ---------------------------------------------------------------------------
# candidate fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Job:
    expr: Expression
    embedding: str
    traces: tuple[Trace, ...]
    bounds: tuple[tuple[str, tuple[float, float]], ...]
    n_starts: int
    n_polish: int
    seed: int


def _run_job(job: _Job) -> FitResult:
    model = ExpressionModel(job.expr, job.embedding)
    return fit_model(model, list(job.traces), dict(job.bounds), n_starts=job.n_starts,
                     seed=job.seed, n_polish=job.n_polish)


def fit_candidates(exprs: Sequence[Expression], traces: Sequence[Trace], cfg: RunConfig) -> list[FitResult]:
    """Fit every expression to ``traces``; results follow the input order.

    Each candidate's start sequence is seeded from the global seed and its
    text form, so results do not depend on ``cfg.jobs``.
    """
    bounds = tuple(sorted(cfg.bounds.items()))
    jobs = [
        _Job(e, cfg.embedding, tuple(traces), bounds, cfg.n_starts, cfg.n_polish,
             derive_seed(cfg.seed, str(e)))
        for e in exprs
    ]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def _groups(traces: Sequence[Trace], cfg: RunConfig) -> list[tuple[str, list[Trace]]]:
    # doses share one parameter set; otherwise every label is its own panel
    if cfg.embedding == DOSE_ODE:
        return [("joint", list(traces))]
    return [(safe_name(tr.label) if tr.label else f"trace{i + 1}", [tr]) for i, tr in enumerate(traces)]


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _load_traces(cfg: RunConfig) -> list[Trace]:
    traces = []
    for path in cfg.inputs:
        traces.extend(ingest_trace(path, cfg.hold_every, cfg.hold_offset))
    if cfg.doses:
        if len(cfg.doses) != len(traces):
            raise ConfigError(f"{len(cfg.doses)} doses given for {len(traces)} traces")
        traces = [replace_dose(tr, d) for tr, d in zip(traces, cfg.doses)]
    for tr in traces:
        if tr.floor_fallback:
            log.warning("trace %r has no positive SEM; using 0.05*median|y| = %.4g",
                        tr.label, tr.sigma_floor)
    return traces


def replace_dose(tr: Trace, dose: float) -> Trace:
    return Trace(tr.t, tr.y, tr.sem, label=tr.label, dose=dose, every=tr.every, offset=tr.offset)


def _bound_text(flags: dict[str, str]) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(flags.items()))


def _ranked_rows(rows: Sequence[ModelReportRow]) -> list[list]:
    return [
        [i + 1, r.expression, r.p, r.chi2_train, r.wmse_train, r.wmse_hold, r.score,
         r.aic, r.bic, r.d_aic, r.d_bic, _bound_text(r.bound_flags)]
        for i, r in enumerate(rows)
    ]


RANKED_HEADER = ["rank", "expression", "p", "chi2_train", "wmse_train", "wmse_hold", "score",
                 "AIC", "BIC", "dAIC", "dBIC", "bound_flags"]


def run_search(cfg: RunConfig, out: Path) -> list[str]:
    """Enumerate, fit, score and rank; returns the names of written files."""
    traces = _load_traces(cfg)
    kind = GRAMMARS[cfg.grammar]
    exprs = enumerate_expressions(GrammarConfig(kind, cfg.max_depth, cfg.max_nodes))
    score_cfg = ScoreConfig(cfg.lambda_depth, cfg.lambda_nodes)
    written = []
    any_feasible = False
    for group, members in _groups(traces, cfg):
        log.info("group %s: fitting %d candidates", group, len(exprs))
        fits = fit_candidates(exprs, members, cfg)
        ranked = rank_models(report_row(f, e, score_cfg) for f, e in zip(fits, exprs))
        if not math.isfinite(ranked[0].score):
            log.error("group %s: every candidate is infeasible", group)
            continue
        any_feasible = True
        name = f"ranked_{group}.csv"
        write_csv(out / name, RANKED_HEADER, _ranked_rows(ranked))
        written.append(name)

        best = ranked[0]
        fit = best.fit
        name = f"best_params_{group}.csv"
        write_csv(out / name, ["expression", "parameter", "value", "bound"],
                  [[best.expression, n, v, fit.bound_hits.get(n, "")] for n, v in fit.params.items()])
        written.append(name)

        # comparators for the plot: the simple Hill block, a single gate, and the winner
        by_text = {str(e): (e, f) for e, f in zip(exprs, fits)}
        comps = {}
        for col, e in (("hill", Block(R, HILL)), ("G_R", Block(R, EML))):
            if str(e) in by_text:
                comps[col] = by_text[str(e)]
            else:
                comps[col] = (e, fit_candidates([e], members, cfg)[0])
        best_expr = by_text[best.expression][0]
        comps["best"] = (best_expr, fit)
        for tr in members:
            cols = []
            for col in ("hill", "G_R", "best"):
                e, f = comps[col]
                model = ExpressionModel(e, cfg.embedding)
                cols.append(model.predict(f.theta, tr.t, tr.dose) if f.feasible
                            else np.full(tr.t.size, np.nan))
            hold = np.zeros(tr.t.size, dtype=int)
            hold[tr.split.hold] = 1
            label = safe_name(tr.label) if tr.label else group
            name = f"plot_{label}.csv" if cfg.embedding == DOSE_ODE else f"plot_{group}.csv"
            write_csv(out / name, ["t", "y", "sem", "hold", "hill", "G_R", "best"],
                      zip(tr.t, tr.y, tr.sigma, hold, *cols))
            written.append(name)
    if not any_feasible:
        raise InfeasibleError("every candidate is infeasible in every group")
    return written


CASCADE_HEADER = ["K", "p", "best_k_fit", "best_tau0", "chi2_train", "wmse_hold",
                  "AIC", "BIC", "dAIC", "dBIC"]


def _bench_trace(cfg: RunConfig) -> Trace:
    if cfg.inputs:
        traces = _load_traces(cfg)
        if len(traces) != 1:
            raise DataError("cascade-bench takes exactly one trace")
        return traces[0]
    times = np.linspace(0.0, cfg.t_end, cfg.n_points)
    tr, _ = benchmark_trace(cfg.network, times)
    return Trace(tr.t, tr.y, tr.sem, label=tr.label, every=cfg.hold_every, offset=cfg.hold_offset)


def run_cascade_bench(cfg: RunConfig, out: Path) -> list[str]:
    trace = _bench_trace(cfg)
    grid = reservoir_grid_search(
        trace, cfg.k_values, np.linspace(*cfg.k_fit_grid), np.linspace(*cfg.tau0_grid)
    )
    hill_expr = Block(R, HILL)
    hill_cfg = replace(cfg, embedding="static")
    hill = fit_candidates([hill_expr], [trace], hill_cfg)[0]
    if not hill.feasible:
        raise InfeasibleError("Hill comparator fit failed")
    h_aic, h_bic = aic_bic(hill.chi2_train, hill.n_train, hill.n_params)

    rows = [[0, hill.n_params, "", "", hill.chi2_train, hill.wmse_hold, h_aic, h_bic]]
    for K in grid.K_values:
        r = grid.best[K]
        rows.append([K, r.fit.n_params, r.spec.k_fit, r.spec.tau0, r.fit.chi2_train,
                     r.fit.wmse_hold, r.aic, r.bic])
    i_min = min(range(len(rows)), key=lambda i: rows[i][6])
    for r in rows:
        r += [r[6] - rows[i_min][6], r[7] - rows[i_min][7]]
    write_csv(out / "cascade_report.csv", CASCADE_HEADER, rows)

    K_best = rows[i_min][0] if rows[i_min][0] > 0 else grid.K_values[-1]
    best = grid.best[K_best]
    states = cascade_simulate(best.spec, trace.t)
    write_csv(out / "cascade_states.csv", ["t"] + [f"z_{j}" for j in range(1, K_best + 1)],
              (np.concatenate([[t], z]) for t, z in zip(trace.t, states)))

    hold = np.zeros(trace.t.size, dtype=int)
    hold[trace.split.hold] = 1
    hill_pred = ExpressionModel(hill_expr, "static").predict(hill.theta, trace.t)
    write_csv(out / "cascade_fit.csv", ["t", "y", "sem", "hold", "hill", f"cascade_K{K_best}"],
              zip(trace.t, trace.y, trace.sigma, hold, hill_pred, best.readout.predict(states)))
    return ["cascade_report.csv", "cascade_states.csv", "cascade_fit.csv"]


def run_toybench(cfg: RunConfig, out: Path) -> list[str]:
    times = np.linspace(0.0, cfg.t_end, cfg.n_points)
    tr, traj = benchmark_trace(cfg.network, times)
    write_csv(out / "benchmark.csv", ["t", "R", "A_terminal", "I_terminal", "y_true", "y_obs"],
              zip(traj.t, traj.R, traj.A[:, -1], traj.I[:, -1], traj.y_true, tr.y))
    write_trace_csv(out / "benchmark_trace.csv", [tr])
    return ["benchmark.csv", "benchmark_trace.csv"]


PIPELINES = {"search": run_search, "cascade-bench": run_cascade_bench, "toybench": run_toybench}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emlode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI run configuration")
        p.add_argument("--input", action="append", type=Path, dest="inputs",
                       help="trace CSV (repeatable; replaces the config's inputs)")
        p.add_argument("--grammar", choices=sorted(GRAMMARS))
        p.add_argument("--max-depth", type=int)
        p.add_argument("--max-nodes", type=int)
        p.add_argument("--embedding", choices=EMBEDDINGS)
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="parallel fitting workers")
        p.add_argument("--out", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(subcommand=args.subcommand)
    if args.config is not None:
        cfg = load_config(args.config, cfg)
        cfg.subcommand = args.subcommand
    if args.inputs:
        cfg.inputs = tuple(str(p.resolve()) for p in args.inputs)
    for attr in ("grammar", "max_depth", "max_nodes", "embedding", "seed", "jobs"):
        v = getattr(args, attr)
        if v is not None:
            setattr(cfg, attr, v)
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg.validate()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        written = PIPELINES[cfg.subcommand](cfg, out)
        write_manifest(out / "manifest.ini", cfg, written)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
