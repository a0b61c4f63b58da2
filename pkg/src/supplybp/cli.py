"""Command-line front end.

    supplybp graphinfo NETWORK
    supplybp se NETWORK [MEASUREMENTS] [--graph fc --graph fv ...] [--seeds N] ...
    supplybp gas NETWORK [--graph fc|fv] [--single-anchor] ...

Exit codes: 0 success (a diverged run is a result, not a failure), 1 usage
error, 2 input error.  Every ``se``/``gas`` run writes ``manifest.json``
with the fully resolved parameters next to its CSV traces and
``summary.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bp import BpOptions, Damping, StopRule, run
from .errors import InnerDiverged, NoConvergence, SingularSystem, SupplyBPError
from .factor_graph import UNINFORMATIVE_VARIANCE, GraphKind, LinearGaussianFactor, ProblemSpec, build_graph
from .gas import GnOptions, run_modified_gn
from .network import NetworkKind, load_network, network_loop_count
from .oracle import exact_marginals, solve_gas_exact
from .power import Scenario, build_se_problem, delta_mu, delta_sigma, load_measurements, synthesize_measurements

log = logging.getLogger("supplybp")

EXIT_OK, EXIT_USAGE, EXIT_INPUT = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="supplybp", description="Gaussian belief propagation on supply networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("graphinfo", help="loop and node counts of the three factor graphs")
    g.add_argument("network")

    def bp_flags(sp, graphs, default_stop):
        sp.add_argument("network")
        sp.add_argument("--graph", choices=graphs, action="append",
                        help="factor graph (repeatable for se; default: all)")
        sp.add_argument("--damping", choices=["off", "coin"], default=None,
                        help="message damping (default: coin for fv, off otherwise)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--max-iters", type=_positive_int, default=None)
        sp.add_argument("--tol", type=_positive_float, default=None)
        sp.add_argument("--stop", choices=["sweep", "halving"], default=default_stop)
        sp.add_argument("--out", default=None, help="output directory (default: print summary only)")

    s = sub.add_parser("se", help="DC state estimation experiment")
    bp_flags(s, ["fv", "fc", "ff"], "sweep")
    s.add_argument("measurements", nargs="?", help="measurement file (default: synthesize from truth angles)")
    s.add_argument("--synthesize", action="store_true",
                   help="synthesize measurements from the truth angles (the default without a file)")
    s.add_argument("--seeds", type=_positive_int, default=1, help="number of synthetic measurement sets")
    s.add_argument("--pmu", choices=["on", "off"], default="on")

    gs = sub.add_parser("gas", help="gas steady state by modified Gauss-Newton")
    bp_flags(gs, ["fv", "fc"], "halving")
    gs.add_argument("--single-anchor", action="store_true")
    return p


def _worker_slots(jobs: int) -> int:
    raw = os.environ.get("SUPPLYBP_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer SUPPLYBP_THREADS=%r", raw)
    return max(1, min(cap, jobs))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _bp_options(args, kind: str, n_vertices: int) -> BpOptions:
    stop = StopRule(args.stop)
    damping = args.damping or ("coin" if kind == "fv" else "off")
    if args.tol is not None:
        tol = args.tol
    else:
        tol = 1e-10 / n_vertices if stop is StopRule.HALVING_DELTA else 1e-9
    max_iters = args.max_iters or (200_000 if args.command == "gas" else 1000)
    return BpOptions(max_iters=max_iters, tolerance=tol, damping=Damping(damping), seed=args.seed, stop_rule=stop)


def _opts_doc(o: BpOptions) -> dict:
    return {"max_iters": o.max_iters, "tolerance": o.tolerance, "damping": o.damping.value,
            "seed": o.seed, "stop_rule": o.stop_rule.value}


# -- graphinfo ---------------------------------------------------------------------

def cmd_graphinfo(args) -> int:
    net = load_network(args.network)
    # counts depend only on topology; a trivial spec is enough to build the graphs
    spec = _topology_spec(net)
    report = {"vertices": net.n_vertices, "links": net.n_links, "network_loops": network_loop_count(net)}
    for kind in GraphKind:
        stats = build_graph(spec, kind).stats()
        report[kind.value] = stats
        report[f"{kind.value}_loops"] = stats["loops"]
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _topology_spec(net):
    ids = [v.id for v in net.vertices]
    vf = []
    for i in range(net.n_vertices):
        coeffs = {ids[i]: float(net.degree(i))}
        for _, j in net.incident[i]:
            coeffs[ids[j]] = coeffs.get(ids[j], 0.0) - 1.0
        vf.append((LinearGaussianFactor(0.0, 1.0, coeffs), LinearGaussianFactor(0.0, UNINFORMATIVE_VARIANCE, {ids[i]: 1.0})))
    lf = [LinearGaussianFactor(0.0, 1.0, {ids[a]: 1.0, ids[b]: -1.0}) for a, b in net.endpoints]
    return ProblemSpec(net, vf, lf)


# -- se ------------------------------------------------------------------------------

def _se_job(net, spec, oracle, kind, opts, seed):
    fg = build_graph(spec, kind)
    ref = (oracle.flow_mean, oracle.flow_var)

    def observe(t, beliefs):
        est = beliefs.flow_marginals()
        return {"delta_mu": delta_mu(est, ref), "delta_sigma": delta_sigma(est, ref)}

    t0 = time.perf_counter()
    beliefs, trace, _ = run(fg, opts, observer=observe)
    wall = time.perf_counter() - t0
    last = next((m for m in reversed(trace.metrics) if m), {"delta_mu": None, "delta_sigma": None})
    summary = {
        "graph": kind.value,
        "seed": seed,
        "status": trace.status.value,
        "iterations": trace.iterations,
        "iterations_to_tolerance": trace.iterations if trace.converged else None,
        "delta_mu": last["delta_mu"],
        "delta_sigma": last["delta_sigma"],
        "wall_time_per_iteration": wall / max(trace.iterations, 1),
    }
    if trace.error:
        summary["error"] = trace.error
    return summary, trace.to_csv(("delta_mu", "delta_sigma"))


def cmd_se(args) -> int:
    net = load_network(args.network)
    if net.kind is not NetworkKind.POWER_DC:
        raise SupplyBPError(f"se needs a power network, got {net.kind.value}")
    kinds = [GraphKind(k) for k in dict.fromkeys(args.graph or ["fc", "fv", "ff"])]
    if args.measurements and args.synthesize:
        raise _UsageError("give either a measurement file or --synthesize, not both")
    if args.measurements:
        seeds = [args.seed]
        problems = {args.seed: build_se_problem(net, load_measurements(net, args.measurements))}
    else:
        seeds = list(range(args.seed, args.seed + args.seeds))
        problems = {}
        for s in seeds:
            sc = Scenario(with_pmu=args.pmu == "on", seed=s)
            problems[s] = build_se_problem(net, synthesize_measurements(net, None, sc))
    oracles = {s: exact_marginals(p) for s, p in problems.items()}
    jobs = [(k, s) for k in kinds for s in seeds]
    opts = {k: _bp_options(args, k.value, net.n_vertices) for k in kinds}

    with ThreadPoolExecutor(max_workers=_worker_slots(len(jobs))) as pool:
        futures = [pool.submit(_se_job, net, problems[s], oracles[s], k, opts[k], s) for k, s in jobs]
        results = [f.result() for f in futures]

    summary = {"runs": [r[0] for r in results]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for (k, s), (_, csv_text) in zip(jobs, results):
            (out / f"se_{k.value}_seed{s}.csv").write_text(csv_text, encoding="utf-8")
        _write_json(out / "summary.json", summary)
        _write_json(out / "manifest.json", {
            "command": "se",
            "version": __version__,
            "network": str(args.network),
            "network_sha256": _sha256(args.network),
            "measurements": args.measurements,
            "measurements_sha256": _sha256(args.measurements) if args.measurements else None,
            "pmu": args.pmu,
            "seeds": seeds,
            "graphs": [k.value for k in kinds],
            "bp": {k.value: _opts_doc(opts[k]) for k in kinds},
        })
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# -- gas -----------------------------------------------------------------------------

def cmd_gas(args) -> int:
    net = load_network(args.network)
    if net.kind is not NetworkKind.GAS:
        raise SupplyBPError(f"gas needs a gas network, got {net.kind.value}")
    if args.graph and len(set(args.graph)) > 1:
        raise _UsageError("gas takes a single --graph")
    kind = (args.graph or ["fc"])[0]
    inner = _bp_options(args, kind, net.n_vertices)
    gn = GnOptions(inner=inner, graph_kind=GraphKind(kind), single_anchor=args.single_anchor)
    try:
        q_ref, _ = solve_gas_exact(net)
    except (NoConvergence, SingularSystem) as exc:
        log.warning("no oracle flows (%s); delta column is the change of Q* per step", exc)
        q_ref = None

    t0 = time.perf_counter()
    try:
        state, trace = run_modified_gn(net, gn, q_reference=q_ref)
        status = "converged" if state.converged else "max_gn_steps"
        failed_at = None
    except InnerDiverged as exc:
        trace, status, failed_at = exc.trace, "diverged", exc.step
    wall = time.perf_counter() - t0
    last = trace.steps[-1] if trace.steps else None
    summary = {
        "graph": kind,
        "status": status,
        "gn_steps": len(trace),
        "bp_iters": trace.bp_iters,
        "delta": None if last is None or np.isnan(last.delta) else last.delta,
        "residual": None if last is None or np.isnan(last.residual) else last.residual,
        "delta_is_oracle_error": q_ref is not None,
        "wall_time": wall,
    }
    if failed_at is not None:
        summary["diverged_at_gn_step"] = failed_at
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"gas_{kind}.csv").write_text(trace.to_csv(), encoding="utf-8")
        _write_json(out / "summary.json", summary)
        _write_json(out / "manifest.json", {
            "command": "gas",
            "version": __version__,
            "network": str(args.network),
            "network_sha256": _sha256(args.network),
            "graph": kind,
            "single_anchor": args.single_anchor,
            "max_gn_steps": gn.max_gn_steps,
            "gn_tolerance": gn.tolerance,
            "bp": _opts_doc(inner),
        })
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"graphinfo": cmd_graphinfo, "se": cmd_se, "gas": cmd_gas}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"supplybp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SupplyBPError, OSError) as exc:
        print(f"supplybp: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
