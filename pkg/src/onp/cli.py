"""Command-line front end: ``onp generate | solve | verify | benchmark``.

Every command writes a ``run.json`` manifest next to its outputs.  Exit codes:
0 success, 1 tolerance failure, 2 usage or IO error, 3 solver did not converge.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import statistics
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3

RESULT_SCHEMA = "onp.solve-result"
VERIFY_SCHEMA = "onp.verify-result"
BENCH_COLUMNS = ("routes", "path", "median_ms", "std_ms", "speedup", "kernel_median_ms", "kernel_speedup",
                 "objective", "repeats")
SCHEMA_VERSION = 1

# Sub-seed offsets; everything derives from the single --seed flag.
SCENARIO_SEED_OFFSET = 0
POINT_SEED_OFFSET = 1000

log = logging.getLogger("onp")


class UsageError(Exception):
    pass


def _clean(obj):
    """JSON-safe copy: numpy to builtins, non-finite floats to None."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def _write_run_manifest(out_dir, command, args, extra=None):
    from . import __version__

    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {
        "schema": "onp.run",
        "version": SCHEMA_VERSION,
        "command": command,
        "argv": sys.argv[1:],
        "flags": flags,
        "seed": flags.get("seed"),
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        doc.update(extra)
    _write_json(Path(out_dir) / "run.json", doc)


def _pin_threads(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# Instance files


def _load_instance(path):
    from . import problem as pb

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"instance file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != "onp.instance":
        raise UsageError(f"{path}: not an instance manifest")
    return pb.instance_from_manifest(doc)


def _scenarios(inst, n, seed):
    from . import problem as pb

    return pb.sample_scenarios(inst.elasticity, n, seed + SCENARIO_SEED_OFFSET)


def _generate_instance(args):
    from . import network as nw
    from . import problem as pb

    if args.kind == "toy4":
        return pb.gen_toy_instance(seed=args.seed)
    if args.kind == "random":
        return pb.gen_random_instance(args.routes, args.edges, args.commodities, seed=args.seed,
                                      mean=args.mean)
    if args.kind == "sioux":
        return pb.gen_sioux_falls_instance(seed=args.seed)
    if args.kind == "tntp":
        if not args.net:
            raise UsageError("tntp needs --net FILE")
        if not args.pairs:
            raise UsageError("tntp needs --pairs S:T [S:T ...]")
        try:
            with open(args.net) as fh:
                net = nw.load_tntp(fh)
        except OSError as exc:
            raise UsageError(f"cannot read {args.net}: {exc}") from None
        pairs = [_parse_pair(s, net) for s in args.pairs]
        com = [_parse_pair(s, net) for s in (args.commodity_pairs or args.pairs[:1])]
        return pb.gen_tntp_instance(net, pairs, args.max_per_pair, args.max_length, com, seed=args.seed,
                                    source=str(Path(args.net).resolve()), mean=args.mean)
    raise UsageError(f"unknown generator {args.kind!r}")


def _parse_pair(text, net):
    """``S:T`` in the network's own node labels."""
    try:
        a, b = text.split(":")
        index = {str(lab): i for i, lab in enumerate(net.node_labels)}
        return index[a], index[b]
    except (ValueError, KeyError):
        raise UsageError(f"bad node pair {text!r}; expected S:T with labels from the network") from None


def cmd_generate(args):
    from . import network as nw
    from . import problem as pb

    inst = _generate_instance(args)
    out = Path(args.out)
    doc = pb.manifest_document(inst)
    _write_json(out / "instance.json", doc)
    (out / "network.tntp").write_text(nw.dump_tntp(inst.network))
    _write_json(out / "routes.json", inst.routes.to_dict())
    _write_json(out / "commodity.json", inst.commodity.to_dict())
    _write_run_manifest(out, "generate", args, {"instance_hash": pb.manifest_hash(inst)})
    print(f"wrote {out / 'instance.json'}: |V|={inst.network.node_count} |E|={inst.n_edges} "
          f"|R|={inst.n_routes} |K|={inst.n_commodities}")
    return EXIT_OK


def _solver_config(args, **over):
    from .solver import SolverConfig

    kw = {"tol_kkt": args.tol, "max_iter": args.max_iter, "path": args.path}
    if getattr(args, "hessian_mode", None):
        kw["hessian_mode"] = args.hessian_mode
    kw.update(over)
    try:
        return SolverConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_solve(args):
    from . import problem as pb
    from . import solver as sv

    inst = _load_instance(args.instance)
    scen = _scenarios(inst, args.samples, args.seed)
    cfg = _solver_config(args)
    state = sv.solve(inst, scen, cfg)
    out = Path(args.out)
    doc = {"schema": RESULT_SCHEMA, "version": SCHEMA_VERSION, "instance_hash": pb.manifest_hash(inst),
           "samples": args.samples, "seed": args.seed, **state.to_dict()}
    _write_json(out / "result.json", doc)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "f", "infeasibility", "kkt", "rho", "delta", "accepted", "step", "wall", "penalty"])
        for t in state.trace:
            w.writerow([t.iter, repr(t.f), repr(t.infeasibility), repr(t.kkt), repr(t.rho), repr(t.delta),
                        int(t.accepted), t.step, f"{t.wall:.6f}", repr(t.penalty)])
    _write_run_manifest(out, "solve", args, {"instance_hash": pb.manifest_hash(inst)})
    print(f"status={state.status} iterations={state.iter} f={state.f:.12g} "
          f"stationarity={state.residuals.get('stationarity', float('nan')):.3e} "
          f"feasibility={state.residuals.get('feasibility', float('nan')):.3e}")
    return EXIT_OK if state.converged else EXIT_NONCONVERGED


def _verify_point(inst, scen, args, rng):
    import numpy as np

    from . import oracle as orc

    if args.p == "mid":
        return inst.p_mid
    if args.p == "random":
        return orc.sample_smooth_point(inst, scen, rng, args.step)
    try:
        with open(args.p) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read price vector from {args.p}: {exc}") from None
    p = np.asarray(doc["p"] if isinstance(doc, dict) else doc, dtype=float)
    if p.shape != (inst.n_routes,):
        raise UsageError(f"price vector has length {p.size}, expected {inst.n_routes}")
    return p


def cmd_verify(args):
    import numpy as np

    from . import evaluator as ev
    from . import oracle as orc
    from . import problem as pb

    inst = _load_instance(args.instance)
    scen = _scenarios(inst, args.samples, args.seed)
    rng = np.random.default_rng(args.seed + POINT_SEED_OFFSET)
    reports, parity = [], []
    ok = True
    for _ in range(args.points):
        p = _verify_point(inst, scen, args, rng)
        g = orc.check_gradient(inst, scen, p, args.step)
        h = orc.check_hessian(inst, scen, p, args.step)
        reports.append({"gradient": g.to_dict(), "hessian": h.to_dict()})
        ok &= g.max_rel_error <= args.grad_tol and h.max_rel_error <= args.hess_tol
        if inst.n_routes <= orc.DENSE_REFERENCE_CAP:
            ref = orc.dense_reference(inst, scen, p)
            flows = ev.eval_flows(inst, scen, p)
            errs = {
                "objective": orc.rel_error(ev.eval_objective(inst, scen, flows), ref.objective)[0],
                "constraint": orc.rel_error(ev.eval_constraint(inst, scen, flows), ref.constraint)[0],
                "gradient": orc.rel_error(ev.grad_f_sparse(inst, scen, flows), ref.gradient)[0],
                "constraint_jacobian": orc.rel_error(ev.grad_c(inst, scen, flows), ref.constraint_jacobian)[0],
                "hessian": orc.rel_error(ev.hess_f(inst, scen, flows), ref.hessian)[0],
            }
            parity.append(errs)
            ok &= max(errs.values()) <= args.parity_tol
        if args.p not in ("random",):
            break
    out = Path(args.out)
    doc = {"schema": VERIFY_SCHEMA, "version": SCHEMA_VERSION, "instance_hash": pb.manifest_hash(inst),
           "passed": bool(ok), "fd": reports, "parity": parity,
           "tolerances": {"gradient": args.grad_tol, "hessian": args.hess_tol, "parity": args.parity_tol}}
    _write_json(out / "verify.json", doc)
    _write_run_manifest(out, "verify", args)
    worst_g = max(r["gradient"]["max_rel_error"] for r in reports)
    worst_h = max(r["hessian"]["max_rel_error"] for r in reports)
    worst_p = max((max(e.values()) for e in parity), default=float("nan"))
    print(f"{'PASS' if ok else 'FAIL'} gradient={worst_g:.2e} hessian={worst_h:.2e} parity={worst_p:.2e}")
    return EXIT_OK if ok else EXIT_TOLERANCE


# ---------------------------------------------------------------------------
# Benchmark


def kernel_time(inst, scen, p, path):
    """Seconds for one gradient + constraint Jacobian + Hessian evaluation."""
    from . import evaluator as ev

    t = time.perf_counter()
    flows = ev.eval_flows(inst, scen, p)
    if path == "dense":
        ev.grad_f_dense(inst, scen, flows)
    else:
        ev.grad_f_sparse(inst, scen, flows)
    ev.grad_c(inst, scen, flows, mode=path)
    ev.hess_f(inst, scen, flows, mode=path)
    return time.perf_counter() - t


def benchmark_rows(sizes, repeats, samples, seeds, iterations, mean="balanced", progress=None):
    """One row per (size, path): medians over ``repeats`` runs cycling through ``seeds``.

    Each run times the solver under a fixed iteration budget and, separately,
    one kernel evaluation at the start point.  Instance generation and
    scenario sampling are excluded from both timings.
    """
    from . import evaluator as ev
    from . import problem as pb
    from . import solver as sv

    rows = []
    for r in sizes:
        per_path = {"dense": ([], [], []), "sparse": ([], [], [])}
        for k in range(repeats):
            seed = seeds[k % len(seeds)]
            inst = pb.gen_random_instance(r, seed=seed, mean=mean, noise_scale=0.05 if mean == "balanced"
                                          else pb.DEFAULT_NOISE_SCALE)
            scen = pb.sample_scenarios(inst.elasticity, samples, seed + SCENARIO_SEED_OFFSET)
            ev.dense_q(inst)
            for path in ("dense", "sparse"):
                cfg = sv.SolverConfig(max_iter=iterations, path=path)
                t = time.perf_counter()
                st = sv.solve(inst, scen, cfg)
                wall = time.perf_counter() - t
                kt = kernel_time(inst, scen, inst.p_mid, path)
                per_path[path][0].append(wall)
                per_path[path][1].append(kt)
                per_path[path][2].append(st.f)
            if progress:
                progress(r, k)
        med = {path: statistics.median(v[0]) for path, v in per_path.items()}
        kmed = {path: statistics.median(v[1]) for path, v in per_path.items()}
        for path in ("dense", "sparse"):
            walls, kts, objs = per_path[path]
            rows.append({
                "routes": r,
                "path": path,
                "median_ms": 1e3 * med[path],
                "std_ms": 1e3 * (statistics.pstdev(walls) if len(walls) > 1 else 0.0),
                "speedup": med["dense"] / med[path],
                "kernel_median_ms": 1e3 * kmed[path],
                "kernel_speedup": kmed["dense"] / kmed[path],
                "objective": statistics.median(objs),
                "repeats": repeats,
                "objectives": objs,
            })
    return rows


def cmd_benchmark(args):
    sizes = args.routes
    seeds = args.seeds or [args.seed]
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    rows = benchmark_rows(sizes, args.repeats, args.samples, seeds, args.iterations, mean=args.mean,
                          progress=lambda r, k: log.info("routes=%d repeat=%d done", r, k + 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    # Paths must land on the same objective run by run.
    gaps = []
    for i in range(0, len(rows), 2):
        d, s = rows[i]["objectives"], rows[i + 1]["objectives"]
        gaps.append(max(abs(a - b) for a, b in zip(d, s)))
    _write_run_manifest(out, "benchmark", args, {"max_objective_gap": max(gaps)})
    for row in rows:
        print(f"{row['routes']:>6} {row['path']:<6} median={row['median_ms']:.2f}ms "
              f"kernel={row['kernel_median_ms']:.2f}ms speedup={row['speedup']:.2f} "
              f"kernel_speedup={row['kernel_speedup']:.2f}")
    ok = max(gaps) <= args.objective_tol
    if not ok:
        print(f"FAIL dense and sparse objectives differ by {max(gaps):.3e}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_TOLERANCE


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="onp", description="Route pricing under stochastic elastic demand.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build an instance manifest")
    g.add_argument("kind", choices=("toy4", "random", "tntp", "sioux"))
    g.add_argument("--routes", type=int, default=50)
    g.add_argument("--edges", type=int, default=None, help="default: routes/5")
    g.add_argument("--commodities", type=int, default=2)
    g.add_argument("--net", help="TNTP network file (tntp)")
    g.add_argument("--pairs", nargs="+", help="S:T node pairs to enumerate routes for (tntp)")
    g.add_argument("--commodity-pairs", nargs="+", help="S:T pairs forming commodities (tntp)")
    g.add_argument("--max-per-pair", type=int, default=4)
    g.add_argument("--max-length", type=int, default=6)
    g.add_argument("--mean", choices=("centred", "balanced"), default="centred")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", default=".")
    g.set_defaults(func=cmd_generate)

    def solver_flags(p):
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=200)
        p.add_argument("--hessian-mode", choices=("exact", "regularized"), default=None)

    s = sub.add_parser("solve", help="run the trust-region SQP solver")
    s.add_argument("instance")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--path", choices=("dense", "sparse"), default="sparse")
    solver_flags(s)
    s.add_argument("-o", "--out", default=".")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("verify", help="finite-difference and dense-parity checks")
    v.add_argument("instance")
    v.add_argument("--p", default="random", help="mid | random | JSON file with a price vector")
    v.add_argument("--points", type=int, default=5, help="random points to check")
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--step", type=float, default=1e-6)
    v.add_argument("--grad-tol", type=float, default=1e-5)
    v.add_argument("--hess-tol", type=float, default=1e-4)
    v.add_argument("--parity-tol", type=float, default=1e-10)
    v.add_argument("-o", "--out", default=".")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("benchmark", help="dense vs sparse timings as CSV")
    b.add_argument("--routes", type=int, nargs="+", default=list(range(50, 226, 25)))
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--samples", type=int, default=500)
    b.add_argument("--seeds", type=int, nargs="+", default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--iterations", type=int, default=5, help="fixed solver iteration budget per run")
    b.add_argument("--mean", choices=("centred", "balanced"), default="balanced")
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--objective-tol", type=float, default=1e-8)
    b.add_argument("-o", "--out", default=".")
    b.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s")
    _pin_threads(getattr(args, "threads", None))
    from .errors import OnpError

    try:
        return args.func(args)
    except (UsageError, OnpError) as exc:
        print(f"onp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"onp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
