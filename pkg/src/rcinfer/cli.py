"""Command-line interface.

Exit codes: 0 ok, 2 input error, 3 zero mass / infeasible, 4 divergence,
5 resource budget exceeded.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import statistics
import sys
import tempfile
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import baselines, convtree, learning, matching
from .convtree import ZeroMassError
from .model import (ModelError, RCModel, balanced_tree, dump_model, load_model,
                    model_to_dict, noisy_or_table, normal_table)
from .synthetic import random_standard_model

log = logging.getLogger("rcinfer")

EXIT_OK, EXIT_INPUT, EXIT_ZERO_MASS, EXIT_DIVERGED, EXIT_BUDGET = 0, 2, 3, 4, 5


class BudgetExceeded(RuntimeError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def write_output(path: str | None, text: str) -> None:
    """Write ``text`` to ``path`` atomically, or to stdout when ``path`` is None."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# marginals / sample
# ---------------------------------------------------------------------------


def marginals_csv(model: RCModel, res) -> str:
    rows = [("marginal", d, "", _fmt(p)) for d, p in enumerate(res.leaf_marginals)]
    for node in sorted(res.count_marginals):
        rows += [("count", node, c, _fmt(p)) for c, p in enumerate(res.count_marginals[node])]
    rows.append(("log_z", "", "", _fmt(res.log_z)))
    return _csv(rows, ("kind", "node", "count", "value"))


def read_marginals_csv(text: str):
    """Parse :func:`marginals_csv` output into ``(leaf, counts, log_z)``."""
    leaf, counts, log_z = {}, {}, None
    for row in csv.DictReader(io.StringIO(text)):
        if row["kind"] == "marginal":
            leaf[int(row["node"])] = float(row["value"])
        elif row["kind"] == "count":
            counts.setdefault(int(row["node"]), {})[int(row["count"])] = float(row["value"])
        elif row["kind"] == "log_z":
            log_z = float(row["value"])
    leaf_arr = np.array([leaf[d] for d in range(len(leaf))])
    count_arr = {k: np.array([v[c] for c in range(len(v))]) for k, v in counts.items()}
    return leaf_arr, count_arr, log_z


def cmd_marginals(args) -> int:
    model = load_model(args.model)
    res = convtree.marginals(model, args.backend)
    write_output(args.out, marginals_csv(model, res))
    return EXIT_OK


def cmd_sample(args) -> int:
    model = load_model(args.model)
    if args.n < 0:
        raise ValueError("-n must be nonnegative")
    Y = convtree.sample(model, args.n, seed=args.seed, backend=args.backend)
    write_output(args.out, learning.format_dataset(Y))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

ALGORITHMS = ("fft_tree", "tree", "chain")
# runtime growth per doubling of D, used to skip runs predicted to blow the budget
_GROWTH = {"fft_tree": 2.5, "tree": 4.0, "chain": 4.0}
# each timed rep lasts at least this long
MIN_REP_SECONDS = 0.05


@dataclass
class BenchRecord:
    algorithm: str
    D: int
    seconds: float | None
    peak_bytes: int
    status: str = "ok"
    reps: int = 0


def memory_estimate(algorithm: str, D: int) -> int:
    """Analytic bytes held in message storage."""
    if algorithm == "chain":
        return baselines.chain_memory_bytes(D)
    levels = max(1, (D - 1).bit_length())
    return 16 * (D * (levels + 1) + 2 * D)


def _runner(algorithm: str, model: RCModel):
    if algorithm == "fft_tree":
        return lambda: convtree.marginals(model, "auto", count_marginals=False)
    if algorithm == "tree":
        return lambda: convtree.marginals(model, "naive", count_marginals=False)
    if algorithm == "chain":
        return lambda: baselines.chain_marginals(model.unary, model.tables[model.tree.root])
    raise ValueError(f"unknown algorithm {algorithm!r}")


def run_bench(algorithms, d_min: int, d_max: int, reps: int = 3, seed: int = 0,
              time_budget: float = 300.0, memory_budget: int = 2 << 30) -> list:
    """Time each algorithm on random single-potential models of doubling size.

    Each of the ``reps`` measurements follows one warm-up run and averages
    enough back-to-back calls to last ``MIN_REP_SECONDS``; the median is kept.

    A run whose analytic memory exceeds ``memory_budget`` or whose (predicted
    or measured) time exceeds ``time_budget`` is recorded as DNF, and larger
    sizes of that algorithm are skipped as DNF too.
    """
    for d in (d_min, d_max):
        if d < 1 or d & (d - 1):
            raise ValueError("d_min and d_max must be powers of two")
    if d_min > d_max:
        raise ValueError("d_min must not exceed d_max")
    if reps < 3:
        raise ValueError("reps must be at least 3")
    sizes = []
    D = d_min
    while D <= d_max:
        sizes.append(D)
        D *= 2
    records = []
    for alg in algorithms:
        if alg not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {alg!r}; choose from {ALGORITHMS}")
        prev = None
        dead = False
        for D in sizes:
            mem = memory_estimate(alg, D)
            if dead or mem > memory_budget or (
                    prev is not None and prev * _GROWTH[alg] > time_budget):
                dead = True
                records.append(BenchRecord(alg, D, None, mem, "DNF", 0))
                log.info("%s D=%d DNF", alg, D)
                continue
            model = random_standard_model(np.random.default_rng([seed, D]), D)
            run = _runner(alg, model)
            start = time.perf_counter()
            run()  # warm-up
            warm = time.perf_counter() - start
            # short runs are repeated inside each rep so timer jitter averages out
            inner = max(1, math.ceil(MIN_REP_SECONDS / max(warm, 1e-9)))
            times = []
            if warm <= time_budget:
                for _ in range(reps):
                    start = time.perf_counter()
                    for _ in range(inner):
                        run()
                    times.append((time.perf_counter() - start) / inner)
            med = statistics.median(times) if times else warm
            if med > time_budget:
                dead = True
                records.append(BenchRecord(alg, D, None, mem, "DNF", len(times)))
                continue
            prev = med
            records.append(BenchRecord(alg, D, max(med, 1e-9), mem, "ok", reps))
            log.info("%s D=%d %.4fs", alg, D, med)
    return records


def loglog_slope(records, algorithm: str, d_lo: int = 0, d_hi: int | None = None) -> float:
    """Least-squares slope of log(seconds) against log(D) over completed runs."""
    pts = [(r.D, r.seconds) for r in records
           if r.algorithm == algorithm and r.status == "ok"
           and r.D >= d_lo and (d_hi is None or r.D <= d_hi)]
    if len(pts) < 2:
        raise ValueError(f"fewer than two completed runs for {algorithm}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def bench_csv(records) -> str:
    rows = [(r.algorithm, r.D, "" if r.seconds is None else _fmt(r.seconds),
             r.peak_bytes, r.status, r.reps) for r in records]
    return _csv(rows, ("algorithm", "D", "seconds", "peak_bytes", "status", "reps"))


def read_bench_csv(text: str) -> list:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(BenchRecord(row["algorithm"], int(row["D"]),
                               float(row["seconds"]) if row["seconds"] else None,
                               int(row["peak_bytes"]), row["status"], int(row["reps"])))
    return out


def cmd_bench(args) -> int:
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    records = run_bench(algorithms, args.d_min, args.d_max, args.reps, args.seed,
                        args.time_budget, args.memory_budget)
    write_output(args.out, bench_csv(records))
    if not any(r.status == "ok" for r in records):
        return EXIT_BUDGET
    return EXIT_OK


# ---------------------------------------------------------------------------
# match / fit / mil / struct
# ---------------------------------------------------------------------------


def cmd_match(args) -> int:
    problem = matching.load_matching(args.problem)
    if args.method == "lbp":
        opts = matching.LbpOptions(args.max_iters, args.damping, args.tol)
        res = matching.lbp_matching(problem, opts, args.backend)
        log.info("LBP converged=%s iterations=%d residual=%.3g",
                 res.converged, res.iterations, res.residual)
        P = res.marginals
    elif args.method == "node":
        P = matching.node_marginal_baseline(problem)
    else:
        P = matching.exact_matching_marginals(problem)
    rows = [(i, j, _fmt(P[i, j])) for i in range(P.shape[0]) for j in range(P.shape[1])]
    write_output(args.out, _csv(rows, ("i", "j", "p")))
    return EXIT_OK


def _structure(choice: str, data):
    """Tree plus table-bearing nodes for ``fit --structure``."""
    D = data.shape[1]
    if choice == "unary":
        return balanced_tree(D), []
    if choice == "balanced":
        tree = balanced_tree(D)
    elif choice in ("adaptive", "anti"):
        tree = learning.agglomerative_structure(data, choice)
    else:
        ref = load_model(choice)
        if ref.D != D:
            raise ModelError(f"structure file has {ref.D} variables, data has {D}")
        tree = ref.tree
    return tree, tree.internal_nodes().tolist()


def cmd_fit(args) -> int:
    data = learning.load_dataset(args.data)
    tree, nodes = _structure(args.structure, data)
    opts = learning.FitOptions(args.step, args.iters, args.l1)
    history = []
    params = learning.fit(tree, data, opts, table_nodes=nodes, history=history,
                          backend=args.backend)
    log.info("nll %.6f -> %.6f", history[0], history[-1])
    buf = io.StringIO()
    dump_model(params.to_model(tree), buf)
    write_output(args.out, buf.getvalue() + "\n")
    return EXIT_OK


def _mil_tables(args):
    if args.model == "noisy-or":
        return lambda m: (noisy_or_table(m, args.eps, args.lam, 0),
                          noisy_or_table(m, args.eps, args.lam, 1))
    return lambda m: (normal_table(m, args.mu, args.sigma, 0),
                      normal_table(m, args.mu, args.sigma, 1))


def cmd_mil(args) -> int:
    bags = learning.load_bags(args.bags)
    tables = _mil_tables(args)
    opts = learning.FitOptions(args.step, args.iters, args.l1)
    history = []
    w = learning.train_mil(bags, tables, opts, threads=args.threads, history=history)
    report = []
    for b in bags:
        f0, f1 = tables(b.size)
        report.append({
            "label": b.label,
            "size": b.size,
            "p_positive": float(learning.mil_label_probs(b, w, f0, f1)[1]),
            "expected_positive_count": learning.expected_positive_count(b, w, f0, f1),
        })
    doc = {"weights": w.tolist(), "objective": history[-1], "bags": report}
    write_output(args.out, json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def cmd_struct(args) -> int:
    data = learning.load_dataset(args.data)
    tree = learning.agglomerative_structure(data, args.mode)
    model = RCModel(np.zeros((tree.num_vars, 2)), tree)
    write_output(args.out, json.dumps(model_to_dict(model)) + "\n")
    return EXIT_OK


def cmd_ising(args) -> int:
    Y = learning.ising_gibbs_generate(args.height, args.width, args.coupling, args.n,
                                      args.sweeps, args.seed)
    write_output(args.out, learning.format_dataset(Y))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--backend", choices=convtree.BACKENDS, default="auto")
    common.add_argument("--out", default=None, help="output path (default: stdout)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="rcinfer", description="Exact inference for recursive cardinality models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("marginals", parents=[common], help="marginals, count distributions, log Z")
    p.add_argument("model")
    p.set_defaults(func=cmd_marginals)

    p = sub.add_parser("sample", parents=[common], help="exact joint samples")
    p.add_argument("model")
    p.add_argument("-n", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", parents=[common], help="runtime scaling benchmark")
    p.add_argument("--algorithms", default=",".join(ALGORITHMS))
    p.add_argument("--d-min", type=int, default=1 << 10)
    p.add_argument("--d-max", type=int, default=1 << 19)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--time-budget", type=float, default=300.0, help="seconds per run")
    p.add_argument("--memory-budget", type=int, default=2 << 30, help="bytes per run")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("match", parents=[common], help="bipartite matching marginals")
    p.add_argument("problem")
    p.add_argument("--method", choices=("lbp", "node", "exact"), default="lbp")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--damping", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("fit", parents=[common], help="maximum-likelihood fit")
    p.add_argument("data")
    p.add_argument("--structure", default="balanced",
                   help="unary | balanced | adaptive | anti | path to a model file")
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--l1", type=float, default=0.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mil", parents=[common], help="multiple-instance learning")
    p.add_argument("bags")
    p.add_argument("--model", choices=("noisy-or", "normal"), default="normal")
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--l1", type=float, default=0.0)
    p.set_defaults(func=cmd_mil)

    p = sub.add_parser("ising", parents=[common], help="Gibbs samples from a grid Ising model")
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--coupling", type=float, default=learning.CRITICAL_COUPLING,
                   help="default: the 2D critical coupling 0.5*ln(1+sqrt(2))")
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--sweeps", type=int, default=200)
    p.set_defaults(func=cmd_ising)

    p = sub.add_parser("struct", parents=[common], help="agglomerative tree structure")
    p.add_argument("data")
    p.add_argument("--mode", choices=("adaptive", "anti"), default="adaptive")
    p.set_defaults(func=cmd_struct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ZeroMassError, matching.InfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ZERO_MASS
    except learning.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ModelError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
