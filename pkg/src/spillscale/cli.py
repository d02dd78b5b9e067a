"""Command-line front end.

Subcommands: design (build and save a partition), estimate (one estimate
from realized data), ow-weights (solve the weighting program), oracle
(exact expectations on small instances), replicate (Monte Carlo tables).
All outputs are CSV with platform-independent newlines; identical inputs
produce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import harness, oracle, owopt
from .design import (draw_treatments, extend_uniform_overlap, incidence,
                     scaling_clusters, scaling_rule)
from .estimators import (EstimatorUndefinedError, exposure, hajek, ipw_ht,
                         ols, shrinkage, variance_ci)
from .geometry import build_space, build_space_from_dist
from .outcomes import make_guess, make_sim_dgp, realize


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def load_population(path):
    """Population CSV: either unit_id,x1..xq coordinates or i,j,dist table."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        body = [row for row in reader if row]
    if header[:1] == ["unit_id"] and len(header) >= 2:
        body.sort(key=lambda r: int(r[0]))
        coords = np.array([[float(v) for v in row[1:]] for row in body])
        return build_space(coords)
    if header == ["i", "j", "dist"]:
        ids = sorted({int(r[0]) for r in body} | {int(r[1]) for r in body})
        remap = {u: k for k, u in enumerate(ids)}
        dist = np.zeros((len(ids), len(ids)))
        for i, j, d in body:
            dist[remap[int(i)], remap[int(j)]] = float(d)
        return build_space_from_dist(dist)
    raise SystemExit(f"unrecognized population header in {path}: {header}")


def load_clusters(path, n):
    from .design import ClusterPartition

    assignment = np.full(n, -1, dtype=np.int64)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            assignment[int(row["unit_id"])] = int(row["cluster_id"])
    if np.any(assignment < 0):
        raise SystemExit(f"{path} does not assign every unit a cluster")
    n_clusters = int(assignment.max()) + 1
    clusters = [np.flatnonzero(assignment == c) for c in range(n_clusters)]
    if any(c.size == 0 for c in clusters):
        raise SystemExit(f"{path} has empty cluster ids; renumber 0..C-1")
    return ClusterPartition(assignment=assignment, clusters=clusters,
                            seeds=[int(c[0]) for c in clusters], g=0.0)


def load_outcomes(path, n):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = {name.strip().lower(): name for name in reader.fieldnames}
        if "y" not in cols or "d" not in cols:
            raise SystemExit(f"{path} must have Y and d columns")
        rows = list(reader)
    if len(rows) != n:
        raise SystemExit(f"{path} has {len(rows)} rows for {n} units")
    if "unit_id" in cols:
        rows.sort(key=lambda r: int(r[cols["unit_id"]]))
    Y = np.array([float(r[cols["y"]]) for r in rows])
    d = np.array([int(r[cols["d"]]) for r in rows], dtype=np.int8)
    return Y, d


def cmd_design(args):
    space = load_population(args.population)
    h = scaling_rule(space.n, args.eta, args.c0)
    partition = scaling_clusters(space, h)
    draw = draw_treatments(partition, args.p, args.seed)
    counts = incidence(space, partition, h)
    out = Path(args.out)
    _write(out / "clusters.csv", _csv_text(
        ["unit_id", "cluster_id"],
        [(i, int(partition.assignment[i])) for i in range(space.n)]))
    inc_rows = [("phi", i, int(counts.phi[i])) for i in range(space.n)]
    inc_rows += [("gamma", c, int(counts.gamma[c]))
                 for c in range(partition.n_clusters)]
    _write(out / "incidence.csv", _csv_text(["kind", "id", "value"], inc_rows))
    _write(out / "treatments.csv", _csv_text(
        ["unit_id", "d"], [(i, int(draw.d[i])) for i in range(space.n)]))
    print(f"n={space.n} clusters={partition.n_clusters} h={h:.6g} "
          f"phi_max={counts.phi_max} seed={args.seed}")
    return 0


def cmd_estimate(args):
    space = load_population(args.population)
    partition = load_clusters(args.clusters, space.n)
    Y, d = load_outcomes(args.outcomes, space.n)
    b = np.zeros(partition.n_clusters, dtype=np.int8)
    for c, members in enumerate(partition.clusters):
        vals = np.unique(d[members])
        if vals.size != 1:
            raise SystemExit(f"treatments are not constant within cluster {c}")
        b[c] = vals[0]
    h = args.h if args.h is not None else scaling_rule(space.n, args.eta, args.c0)

    report = None
    flags = []
    try:
        if args.estimator == "ht":
            report = ipw_ht(Y, d, space, partition, h, args.p)
        elif args.estimator == "hajek":
            report = hajek(Y, d, space, partition, h, args.p)
        else:
            extended = extend_uniform_overlap(space, partition, h)
            T = exposure(partition, extended, b)
            if args.estimator == "ols":
                report = ols(Y, T)
            else:
                guess = make_guess(space, args.guess_seed)
                report = shrinkage(Y, T, d, guess, h=h)
        if args.estimator in ("hajek", "ols") and args.ci_level > 0:
            if args.estimator == "ols":
                T_ci = T.T
            else:
                counts = incidence(space, partition, h)
                T_ci = (counts.incidence @ b) / counts.phi
            vr = variance_ci(Y, d, T_ci, report.estimate, space, partition, h,
                             args.eta, args.p, level=args.ci_level,
                             estimator=args.estimator)
            report.variance_hat = vr.variance_hat
            report.ci = vr.ci
            if vr.truncated:
                flags.append("variance_truncated")
    except EstimatorUndefinedError as exc:
        report = None
        flags = [exc.reason]

    if report is not None:
        est = f"{report.estimate:.12g}"
        var = "" if report.variance_hat is None else f"{report.variance_hat:.12g}"
        lo = "" if report.ci is None else f"{report.ci[1]:.12g}"
        hi = "" if report.ci is None else f"{report.ci[2]:.12g}"
    else:
        est = var = lo = hi = ""
    text = _csv_text(["estimator", "estimate", "var_hat", "ci_lo", "ci_hi",
                      "fail_flags"],
                     [(args.estimator, est, var, lo, hi, ";".join(flags))])
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_ow_weights(args):
    from .geometry import InterferenceBudget

    space = load_population(args.population)
    partition = load_clusters(args.clusters, space.n)
    h = args.h if args.h is not None else scaling_rule(space.n, args.eta, args.c0)
    grid = ([float(v) for v in args.grid.split(",") if v.strip()]
            if args.grid else owopt.default_ow_grid(h))
    budget = InterferenceBudget(eta=args.eta, k1=args.k1, ybar=args.ybar)
    tables, start, ow = owopt.optimize_weights(
        space, partition, grid, args.p, budget, h, method=args.method,
        mc_draws=args.mc_draws, seed=args.seed)
    out = Path(args.out)
    rows = [(i, f"{tables.grid[s]:.12g}", f"{ow.W[i, s]:.12g}")
            for i in range(space.n) for s in range(tables.grid.size)]
    _write(out / "weights.csv", _csv_text(["unit_id", "s", "w"], rows))
    _write(out / "qp_report.csv", _csv_text(
        ["objective", "kkt_residual", "iterations", "converged",
         "ipw_objective"],
        [(f"{ow.objective_value:.12g}", f"{ow.kkt_residual:.12g}",
          ow.iterations, int(ow.converged), f"{start.objective_value:.12g}")]))
    print(f"objective={ow.objective_value:.6g} "
          f"ipw_start={start.objective_value:.6g} iters={ow.iterations}")
    return 0


def cmd_oracle(args):
    space = load_population(args.population)
    partition = load_clusters(args.clusters, space.n)
    outcomes = make_sim_dgp(space, args.seed)
    h = args.h if args.h is not None else scaling_rule(space.n, args.eta, args.c0)
    if args.dump_matrices:
        if space.n > 500:
            raise SystemExit("--dump-matrices is limited to n <= 500")
        guess = make_guess(space, args.seed)
        out = Path(args.dump_matrices)
        np.savetxt(out / "A.csv" if out.is_dir() else out.with_name("A.csv"),
                   outcomes.A, delimiter=",", fmt="%.12g")
        np.savetxt(out / "A_hat.csv" if out.is_dir() else out.with_name("A_hat.csv"),
                   guess.A_hat, delimiter=",", fmt="%.12g")

    enum = oracle.enumerate_assignments(partition, args.p)

    def run(b):
        d = np.asarray(b)[partition.assignment]
        Y = realize(outcomes, d)
        if args.estimator == "ht":
            return ipw_ht(Y, d, space, partition, h, args.p).estimate
        if args.estimator == "hajek":
            return hajek(Y, d, space, partition, h, args.p).estimate
        raise SystemExit("oracle supports estimators ht and hajek")

    res = oracle.exact_expectation(run, enum)
    print(f"estimator={args.estimator} n={space.n} C={partition.n_clusters} "
          f"h={h:.6g} p={args.p}")
    print(f"exact_mean={res.mean:.12g} p_defined={res.p_defined:.12g} "
          f"theta={outcomes.theta:.12g}")
    return 0


def _metric_value(rows, slopes, token):
    parts = token.split(":")
    metric = parts[0]
    if metric == "slope":
        est, design = parts[1], parts[2]
        for e, dsg, slope, _ in slopes:
            if e == est and dsg == design:
                return slope
        raise SystemExit(f"no slope for {token}")
    est, design = parts[1], parts[2]
    n = int(parts[3]) if len(parts) > 3 else None
    for r in rows:
        if r.estimator == est and r.design == design and (n is None or r.n == n):
            return getattr(r, metric)
    raise SystemExit(f"no result row matches {token}")


def _check_assertion(rows, slopes, expr):
    for op in ("<=", ">=", "<", ">"):
        if op in expr:
            lhs, rhs = (s.strip() for s in expr.split(op, 1))
            break
    else:
        raise SystemExit(f"assertion {expr!r} needs an operator <,<=,>,>=")

    def value(tok):
        try:
            return float(tok)
        except ValueError:
            return _metric_value(rows, slopes, tok)

    a, b = value(lhs), value(rhs)
    ok = {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]
    print(f"assert {expr}: {a:.6g} {op} {b:.6g} -> {'pass' if ok else 'FAIL'}")
    return ok


def cmd_replicate(args):
    try:
        config = harness.parse_config(Path(args.config).read_text())
    except (harness.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    rows = harness.run_experiment(config)
    out = Path(args.out)
    _write(out / "results.csv", harness.results_csv(rows))
    _write(out / "slopes.csv", harness.slopes_csv(rows))
    for row in rows:
        print(f"n={row.n} design={row.design} est={row.estimator} "
              f"rmse={row.rmse:.6g} bias={row.bias:.6g} "
              f"fail={row.fail_rate:.4g} [{row.seconds:.2f}s]")
    if args.assertion:
        slopes = harness.slopes_table(rows)
        if not all(_check_assertion(rows, slopes, e) for e in args.assertion):
            return 3
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="spillscale")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="build a scaling-clusters partition")
    d.add_argument("--population", required=True)
    d.add_argument("--eta", type=float, default=1.0)
    d.add_argument("--c0", type=float, default=1.0)
    d.add_argument("--p", type=float, default=0.5)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_design)

    e = sub.add_parser("estimate", help="one estimate from realized data")
    e.add_argument("--population", required=True)
    e.add_argument("--outcomes", required=True)
    e.add_argument("--clusters", required=True)
    e.add_argument("--estimator", required=True,
                   choices=["ht", "hajek", "ols", "shrink"])
    e.add_argument("--eta", type=float, default=1.0)
    e.add_argument("--c0", type=float, default=1.0)
    e.add_argument("--h", type=float, default=None)
    e.add_argument("--p", type=float, default=0.5)
    e.add_argument("--ci-level", type=float, default=0.95, dest="ci_level")
    e.add_argument("--guess-seed", type=int, default=0, dest="guess_seed")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_estimate)

    w = sub.add_parser("ow-weights", help="solve the optimal weighting program")
    w.add_argument("--population", required=True)
    w.add_argument("--clusters", required=True)
    w.add_argument("--eta", type=float, required=True)
    w.add_argument("--k1", type=float, required=True)
    w.add_argument("--ybar", type=float, required=True)
    w.add_argument("--p", type=float, default=0.5)
    w.add_argument("--h", type=float, default=None)
    w.add_argument("--c0", type=float, default=1.0)
    w.add_argument("--grid", default=None,
                   help="comma-separated sizes; default h*2^(-5..2)")
    w.add_argument("--method", choices=["exact", "mc"], default="mc")
    w.add_argument("--mc-draws", type=int, default=100_000, dest="mc_draws")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_ow_weights)

    o = sub.add_parser("oracle", help="exact expectation over all assignments")
    o.add_argument("--population", required=True)
    o.add_argument("--clusters", required=True)
    o.add_argument("--estimator", default="ht")
    o.add_argument("--p", type=float, default=0.5)
    o.add_argument("--eta", type=float, default=1.0)
    o.add_argument("--c0", type=float, default=1.0)
    o.add_argument("--h", type=float, default=None)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--dump-matrices", default=None, dest="dump_matrices")
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("replicate", help="Monte Carlo RMSE/coverage tables")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--assert", action="append", default=[], dest="assertion",
                   help="e.g. 'rmse:shrink:scaling_clusters:900 < "
                        "rmse:ols:scaling_clusters:900'")
    r.set_defaults(func=cmd_replicate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
