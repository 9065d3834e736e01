"""Command-line interface.

Subcommands wire the library end to end: ``generate`` builds a pool file
from a covariate CSV, ``test`` runs the randomization test against a pool
file, ``sweep`` scans acceptance probabilities, ``bench`` times the
execution paths, and ``simulate`` writes synthetic datasets. Results go
to stdout as JSON; tabular outputs go to files as CSV; errors are emitted
as single-line JSON on stderr with a nonzero exit. File writes are
atomic (temp file plus rename), so interrupted runs never leave partial
outputs. Figures are rendered next to the delimited outputs when a
``--plot`` path is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile

import numpy as np

from .balance import CovariateMatrix
from .bench import SimConfig, run_benchmark, simulate_data, summarize_benchmark
from .errors import FastrrError, InputFormatError, SchemaMismatchError
from .generation import DesignSpec, generate_pool, pool_summary, read_pool
from .inference import randomization_test, threshold_sweep

def _FMT(v) -> str:
    return repr(float(v))


def _atomic_write_text(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".fastrr-", dir=directory, text=True)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_csv_rows(path) -> list[list[str]]:
    try:
        fh = open(path, "r", newline="")
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from None
    with fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise InputFormatError(f"{path} is empty")
    return rows


def parse_covariates(path):
    """Covariate CSV: header of column names, then rows of finite decimals."""
    rows = _read_csv_rows(path)
    header = [c.strip() for c in rows[0]]
    d = len(header)
    data = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != d:
            raise InputFormatError(
                f"{path}: ragged row {i} has {len(row)} cells, expected {d}"
            )
        vals = []
        for name, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise InputFormatError(
                    f"{path}: non-numeric cell at row {i}, column {name!r}: {cell.strip()!r}"
                ) from None
            if not math.isfinite(v):
                raise InputFormatError(
                    f"{path}: non-finite value at row {i}, column {name!r}: {cell.strip()!r}"
                )
            vals.append(v)
        data.append(vals)
    if not data:
        raise InputFormatError(f"{path} has a header but no data rows")
    return CovariateMatrix(np.asarray(data)), header


def _parse_single_column(path, kind: str) -> np.ndarray:
    rows = _read_csv_rows(path)
    vals = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != 1:
            raise InputFormatError(f"{path}: row {i} must have exactly one cell")
        try:
            v = float(row[0])
        except ValueError:
            raise InputFormatError(
                f"{path}: non-numeric cell at row {i}: {row[0].strip()!r}"
            ) from None
        if not math.isfinite(v):
            raise InputFormatError(f"{path}: non-finite value at row {i}")
        vals.append(v)
    if not vals:
        raise InputFormatError(f"{path} has no data rows")
    arr = np.asarray(vals, dtype=np.float64)
    if kind == "assignment":
        if not np.isin(arr, (0.0, 1.0)).all():
            raise InputFormatError(f"{path}: assignment cells must be 0 or 1")
        return arr.astype(np.int8)
    return arr


def parse_outcomes(path) -> np.ndarray:
    return _parse_single_column(path, "outcomes")


def parse_assignment(path) -> np.ndarray:
    return _parse_single_column(path, "assignment")


def _json_out(payload: dict) -> int:
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    cov, _ = parse_covariates(args.covariates)
    batch = args.batch_size
    if batch is None:
        batch = min(10_000, args.max_draws) if args.mode == "monte_carlo" else 10_000
    design = DesignSpec(
        n_units=cov.n_units,
        n_treated=args.n_treated,
        accept_prob=args.accept_prob,
        mode=args.mode,
        max_draws=args.max_draws,
        batch_size=batch,
        precision_mode=args.precision,
        ridge_scale=args.ridge_scale,
        root_seed=args.seed,
        storage=args.storage,
    )
    pool = generate_pool(cov, design, workers=args.threads, out_path=args.out)
    if args.plot:
        from .plots import save_balance_histogram

        save_balance_histogram(pool.stats, args.plot, threshold=pool.threshold_value)
    summary = pool_summary(pool)
    summary["pool_file"] = args.out
    return _json_out(summary)


def cmd_test(args) -> int:
    pool = read_pool(args.pool)
    y = parse_outcomes(args.outcomes)
    w = parse_assignment(args.observed)
    n = pool.design.n_units
    if y.shape[0] != n or w.shape[0] != n:
        raise SchemaMismatchError(
            f"pool was built for n={n} units but outcomes have {y.shape[0]} "
            f"and observed assignment has {w.shape[0]}"
        )
    result = randomization_test(w, y, pool, find_fi=args.find_fi, alpha=args.alpha)
    if args.emit_dist:
        lines = ["stat"] + [_FMT(v) for v in result.stat_distribution]
        _atomic_write_text(args.emit_dist, "\n".join(lines) + "\n")
    if args.plot:
        from .plots import save_test_distribution

        save_test_distribution(result, args.plot)
    return _json_out(
        {
            "p_value": result.p_value,
            "tau_obs": result.tau_obs,
            "fi": list(result.fi) if result.fi is not None else None,
            "alpha": result.alpha,
            "n_accepted": result.n_accepted,
        }
    )


def _sweep_csv(rows, find_fi: bool) -> str:
    cols = ["accept_prob", "p_value", "n_accepted"]
    if find_fi:
        cols.append("fi_width")
    cols.append("status")
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(_FMT(v))
            else:
                cells.append(str(v).replace(",", ";"))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    cov, _ = parse_covariates(args.covariates)
    y = parse_outcomes(args.outcomes)
    probs = [float(p) for p in args.accept_probs.split(",") if p.strip()]
    if not probs:
        raise InputFormatError("--accept-probs must list at least one probability")
    batch = args.batch_size if args.batch_size is not None else min(10_000, args.max_draws)
    base = DesignSpec(
        n_units=cov.n_units,
        n_treated=args.n_treated,
        accept_prob=probs[0],
        mode="monte_carlo",
        max_draws=args.max_draws,
        batch_size=batch,
        precision_mode=args.precision,
        ridge_scale=args.ridge_scale,
        root_seed=args.seed,
        storage="keys",
    )
    rule = parse_assignment(args.observed) if args.observed else "first"
    rows = threshold_sweep(
        cov,
        base,
        probs,
        y,
        obs_w_rule=rule,
        find_fi=args.find_fi,
        alpha=args.alpha,
        workers=args.threads,
    )
    _atomic_write_text(args.out, _sweep_csv(rows, args.find_fi))
    if args.plot:
        from .plots import save_sweep_curve

        save_sweep_curve(rows, args.plot)
    return _json_out(
        {
            "rows": len(rows),
            "failed": sum(1 for r in rows if r["status"] != "ok"),
            "sweep_file": args.out,
        }
    )


def cmd_bench(args) -> int:
    cfg = SimConfig(
        n=args.n,
        k=args.k,
        max_draws=args.max_draws,
        batch_size=args.batch_size if args.batch_size is not None else min(10_000, args.max_draws),
        replicates=args.replicates,
    )
    paths = tuple(p.strip() for p in args.paths.split(",") if p.strip())
    rows = run_benchmark(
        cfg, paths=paths, accept_prob=args.accept_prob, seed=args.seed, workers=args.threads
    )
    lines = ["path,phase,n,k,max_draws,replicate,seconds"]
    for r in rows:
        lines.append(
            f"{r['path']},{r['phase']},{r['n']},{r['k']},{r['max_draws']},{r['replicate']},{_FMT(r['seconds'])}"
        )
    _atomic_write_text(args.out, "\n".join(lines) + "\n")
    if args.plot:
        from .plots import save_bench_bars

        save_bench_bars(rows, args.plot)
    summary = summarize_benchmark(rows)
    return _json_out({"medians": summary, "timings_file": args.out})


def cmd_simulate(args) -> int:
    cfg = SimConfig(n=args.n, k=args.k, tau_true=args.tau, noise_sd=args.noise_sd)
    cov, assignment, y = simulate_data(cfg, args.seed)
    x_lines = [",".join(f"x{j + 1}" for j in range(cfg.k))]
    for row in cov.values:
        x_lines.append(",".join(_FMT(v) for v in row))
    _atomic_write_text(args.out_covariates, "\n".join(x_lines) + "\n")
    _atomic_write_text(
        args.out_outcomes, "\n".join(["y"] + [_FMT(v) for v in y]) + "\n"
    )
    _atomic_write_text(
        args.out_assignment,
        "\n".join(["w"] + [str(int(b)) for b in assignment.bits]) + "\n",
    )
    return _json_out(
        {
            "n": cfg.n,
            "k": cfg.k,
            "covariates_file": args.out_covariates,
            "outcomes_file": args.out_outcomes,
            "assignment_file": args.out_assignment,
        }
    )


def _add_threads_flag(p):
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker count (default: FASTRR_THREADS env or all hardware threads)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastrr",
        description="Covariate-balanced randomization pools and exact randomization inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build an accepted randomization pool file")
    g.add_argument("--covariates", required=True, help="covariate CSV (header + numeric rows)")
    g.add_argument("--n-treated", type=int, required=True, help="units assigned to treatment")
    g.add_argument("--mode", choices=["exact", "monte_carlo"], default="monte_carlo")
    g.add_argument("--accept-prob", type=float, default=0.01, help="fraction of draws kept")
    g.add_argument("--max-draws", type=int, default=100_000, help="Monte Carlo draw count")
    g.add_argument("--batch-size", type=int, default=None, help="candidates evaluated per batch")
    g.add_argument("--seed", type=int, default=0, help="root seed of the key stream")
    g.add_argument("--precision", choices=["exact", "ridge", "diagonal"], default="exact")
    g.add_argument(
        "--ridge-scale", type=float, default=0.01,
        help="ridge lambda as a multiple of mean(diag(S)) (ridge precision only)",
    )
    g.add_argument("--storage", choices=["keys", "full", "both"], default="keys")
    g.add_argument("--out", "--file", dest="out", required=True, help="pool CSV destination")
    g.add_argument("--plot", default=None, help="render accepted-balance histogram to this file")
    _add_threads_flag(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("test", help="randomization test against a pool file")
    t.add_argument("--pool", required=True, help="pool CSV from 'generate'")
    t.add_argument("--outcomes", required=True, help="one-column outcome CSV")
    t.add_argument("--observed", required=True, help="one-column 0/1 assignment CSV")
    t.add_argument("--find-fi", action="store_true", help="also invert the test for an interval")
    t.add_argument("--alpha", type=float, default=0.05, help="level for the fiducial interval")
    t.add_argument("--emit-dist", default=None, help="write the permutation distribution CSV here")
    t.add_argument("--plot", default=None, help="render the permutation distribution to this file")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("sweep", help="scan acceptance probabilities")
    s.add_argument("--covariates", required=True)
    s.add_argument("--outcomes", required=True)
    s.add_argument("--observed", default=None, help="fixed observed assignment (default: first accepted)")
    s.add_argument("--accept-probs", required=True, help="comma-separated probabilities")
    s.add_argument("--n-treated", type=int, required=True)
    s.add_argument("--max-draws", type=int, default=100_000)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", choices=["exact", "ridge", "diagonal"], default="exact")
    s.add_argument("--ridge-scale", type=float, default=0.01)
    s.add_argument("--find-fi", action="store_true")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out", "--file", dest="out", required=True, help="sweep CSV destination")
    s.add_argument("--plot", default=None, help="render the sweep curve to this file")
    _add_threads_flag(s)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="time the generation/testing paths")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--max-draws", type=int, default=10_000)
    b.add_argument("--batch-size", type=int, default=None)
    b.add_argument("--paths", default="naive,batched,parallel", help="comma-separated path names")
    b.add_argument("--replicates", type=int, default=10)
    b.add_argument("--accept-prob", type=float, default=0.01)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", "--file", dest="out", required=True, help="timing CSV destination")
    b.add_argument("--plot", default=None, help="render timing bars to this file")
    _add_threads_flag(b)
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("simulate", help="write a synthetic dataset")
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--tau", type=float, default=1.0, help="true additive treatment effect")
    m.add_argument("--noise-sd", type=float, default=0.5)
    m.add_argument("--out-covariates", default="X.csv")
    m.add_argument("--out-outcomes", default="y.csv")
    m.add_argument("--out-assignment", default="w.csv")
    m.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FastrrError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
