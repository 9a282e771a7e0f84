"""Command-line front end.

Exit codes: 0 success, 1 a solver flagged non-convergence, 2 input error,
3 infeasible scenario.  Errors are also printed to stdout as a JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import ScenarioConfig, amod_objective, class_metrics, solve_mixed
from .ingest import (InputError, build_from_segments, condense, load_network, parse_network,
                     read_link_endpoints, read_segments, synthetic_demand)
from .latency import DEFAULT_FIT_RANGE, PwaParams
from .netcore import InfeasibleFlow, NetworkError, ODPair, Unreachable
from .recovery import (detect_rebalance_ods, free_flow_times, prune_od_candidates,
                       recover_od_routes, recover_rebalance_routes)
from .report import (SCHEMA_VERSION, config_hash, csv_table, dumps, file_sha256, flows_block,
                     validate)
from .sysopt import MODELS, AmodProblem, solve_amod

log = logging.getLogger("amodflow")

EXIT_OK, EXIT_NONCONVERGED, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _total_demand(net) -> list[ODPair]:
    """Total demand per OD; separate AMoD/private blocks are summed."""
    if net.total:
        return list(net.total)
    merged: dict = {}
    for w in net.amod + net.private:
        key = (w.origin, w.destination)
        merged[key] = merged.get(key, 0.0) + w.demand
    return [ODPair(o, d, q) for (o, d), q in merged.items()]


def _pwa_override(args) -> PwaParams | None:
    if args.beta is None:
        if any(v is not None for v in (args.theta1, args.sigma, args.theta2)):
            raise CliError(EXIT_INPUT, "input", "--theta1/--sigma/--theta2 need --beta")
        return None
    if args.theta1 is None:
        raise CliError(EXIT_INPUT, "input", "--beta needs --theta1")
    try:
        return PwaParams(args.beta, args.theta1, args.sigma, args.theta2)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, "input", str(exc)) from None


def _network_meta(path, graph) -> dict:
    return {"sha256": file_sha256(path), "n_nodes": graph.n_nodes, "n_arcs": graph.n_arcs}


# -- ingest ------------------------------------------------------------------

def cmd_ingest(args) -> int:
    if args.segments:
        links = read_segments(args.segments, args.speeds)
        endpoints = read_link_endpoints(args.links) if args.links else None
        doc = build_from_segments(links, endpoints)
    elif args.network:
        try:
            doc = json.loads(Path(args.network).read_text())
        except FileNotFoundError:
            raise InputError(f"no such file: {args.network}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.network}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    else:
        raise CliError(EXIT_INPUT, "input", "ingest needs --segments or --network")
    net = parse_network(doc, args.walk_speed, args.segments or args.network)
    zones = net.zones
    if args.condense:
        try:
            hubs = json.loads(Path(args.condense).read_text())
        except FileNotFoundError:
            raise InputError(f"no such file: {args.condense}") from None
        if "hubs" not in hubs:
            raise InputError(f"{args.condense}: missing 'hubs' list")
        edges = [tuple(e) for e in hubs["edges"]] if "edges" in hubs else None
        zones = hubs.get("zones", hubs["hubs"])
        doc = condense(net.graph, hubs["hubs"], edges, zones)
        net = parse_network(doc, None, args.condense)
    if args.synthetic_demand:
        od = synthetic_demand(net.graph, args.total_demand, args.synthetic_demand, args.seed,
                              zones or None)
        doc = dict(doc)
        doc["od"] = {"total": [{"o": w.origin, "d": w.destination, "demand": w.demand}
                               for w in od]}
    parse_network(doc, None, "<ingest output>")
    _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# -- solve -------------------------------------------------------------------

def _load(args):
    return load_network(args.network, walk_speed_mph=args.walk_speed)


def _private_flow(path, graph):
    if path is None:
        return None
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    xp = doc.get("xp", doc.get("flows", {}).get("xp"))
    if xp is None or len(xp) != graph.n_arcs:
        raise InputError(f"{path}: expected an 'xp' list with {graph.n_arcs} arc flows")
    return np.asarray(xp, dtype=float)


def _result_block(problem: AmodProblem, sol, model: str) -> dict:
    g = problem.graph
    demand = float(sum(w.demand for w in problem.od))
    return {
        "model": model,
        "objective_model": sol.objective_model,
        "objective_true": sol.objective_true,
        "objective_per_demand": sol.objective_true / demand if demand > 0 else None,
        "certificate": sol.certificate,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "rebalancing_flow_total": float(sol.xr[g.road].sum()),
        "metrics": class_metrics(g, sol.xu, sol.xr, np.zeros(g.n_arcs), demand, 0.0,
                                 problem.alpha, problem.power),
    }


def cmd_solve(args) -> int:
    timings = {}
    t = time.perf_counter()
    net = _load(args)
    g = net.graph
    if net.total:
        od, _ = net.demand(args.gamma)
    else:
        od = list(net.amod)
    od = [w for w in od if w.demand > 0]
    xp = _private_flow(args.private_flow, g)
    timings["load"] = time.perf_counter() - t
    cfg = ScenarioConfig(od, 1.0, args.model, args.lam, not args.no_rebalance, args.update_cost,
                         qp_tol=args.qp_tol, routing_tol=args.routing_tol,
                         fit_range=args.fit_range, pwa=_pwa_override(args))
    problem = AmodProblem(g, od, xp, cfg.surrogate(), cfg.lam, cfg.rebalancing)
    t = time.perf_counter()
    sol = solve_amod(problem, args.model, qp_tol=args.qp_tol, routing_tol=args.routing_tol,
                     update_cost=args.update_cost)
    timings["solve"] = time.perf_counter() - t
    config = _config_dict(args, "solve")
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "solve",
        "config": config,
        "config_hash": config_hash({"config": config, "network": file_sha256(args.network)}),
        "network": _network_meta(args.network, g),
        "results": [_result_block(problem, sol, args.model)],
        "flows": flows_block(g, problem.od, sol.od_flows, sol.xu, sol.xr, problem.private_flow),
    }
    report["results"][0]["metrics"] = class_metrics(
        g, sol.xu, sol.xr, problem.private_flow, float(sum(w.demand for w in od)), 0.0)
    converged = sol.converged
    if args.compare_exact:
        t = time.perf_counter()
        ex_problem = AmodProblem(g, od, xp, None, cfg.lam, False)
        ex = solve_amod(ex_problem, "exact", routing_tol=args.routing_tol)
        timings["exact"] = time.perf_counter() - t
        report["comparison"] = {
            "exact_objective_true": ex.objective_true,
            "deviation_percent": 100.0 * (sol.objective_true - ex.objective_true)
            / ex.objective_true if ex.objective_true > 0 else 0.0,
            "exact_converged": ex.converged,
        }
        converged = converged and ex.converged
    if args.timings:
        report["timings"] = timings
    validate(report)
    _emit(dumps(report), args.out)
    return EXIT_OK if converged else EXIT_NONCONVERGED


# -- equilibrium -------------------------------------------------------------

def _parse_sweep(text: str) -> list[float]:
    try:
        a, b, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise CliError(EXIT_INPUT, "input", f"bad --gamma-sweep {text!r}; expected start:stop:step") from None
    if step <= 0 or a > b or a < 0 or b > 1:
        raise CliError(EXIT_INPUT, "input", f"bad --gamma-sweep {text!r}")
    n = int(round((b - a) / step))
    values = [round(a + k * step, 12) for k in range(n + 1)]
    return [v for v in values if v <= b + 1e-12]


def _scenario(payload) -> dict:
    path, walk_speed, cfg_kwargs, include_flows = payload
    net = load_network(path, walk_speed_mph=walk_speed)
    cfg = ScenarioConfig(_total_demand(net), **cfg_kwargs)
    trace = solve_mixed(net.graph, cfg)
    out = {
        "gamma": cfg.gamma,
        "converged": trace.converged,
        "outer_iterations": len(trace.points),
        "trace": [{"iteration": p.iteration, "cost": p.cost, "cost_no_reg": p.cost_no_reg,
                   "avg_time_amod": p.metrics["avg_time_amod"],
                   "avg_time_private": p.metrics["avg_time_private"],
                   "avg_time_total": p.metrics["avg_time_total"]} for p in trace.points],
        "metrics": trace.final.metrics,
        "amod_objective_true": amod_objective(trace, net.graph, cfg),
        "tap_relative_gap": trace.tap.relative_gap if trace.tap is not None else 0.0,
    }
    if include_flows:
        g = net.graph
        f = trace.final
        od_flows = trace.amod.od_flows if trace.amod is not None else np.zeros((0, g.n_arcs))
        out["flows"] = flows_block(g, trace.amod_demand if trace.amod is not None else [],
                                   od_flows, f.xu, f.xr, f.xp)
    return out


def _threads() -> int:
    raw = os.environ.get("AMOD_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(EXIT_INPUT, "input", f"AMOD_THREADS must be an integer, got {raw!r}") from None


def cmd_equilibrium(args) -> int:
    net = _load(args)   # validate once up front
    gammas = _parse_sweep(args.gamma_sweep) if args.gamma_sweep else [args.gamma]
    kwargs = dict(model=args.model, lam=args.lam, rebalancing=not args.no_rebalance,
                  update_cost=args.update_cost, tap_tol=args.tap_tol,
                  tap_max_iter=args.tap_max_iter, qp_tol=args.qp_tol,
                  routing_tol=args.routing_tol, eq_tol=args.eq_tol, max_outer=args.max_outer,
                  walk_speed_mph=args.walk_speed, fit_range=args.fit_range,
                  pwa=_pwa_override(args))
    payloads = [(args.network, args.walk_speed, {**kwargs, "gamma": gm}, args.include_flows)
                for gm in gammas]
    t = time.perf_counter()
    workers = min(_threads(), len(payloads))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scenarios = list(pool.map(_scenario, payloads))
    else:
        scenarios = [_scenario(p) for p in payloads]
    elapsed = time.perf_counter() - t
    for s in scenarios:
        if not s["converged"]:
            log.warning("gamma=%g: equilibrium not converged", s["gamma"])
    config = _config_dict(args, "equilibrium")
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "equilibrium",
        "config": config,
        "config_hash": config_hash({"config": config, "network": file_sha256(args.network)}),
        "network": _network_meta(args.network, net.graph),
        "scenarios": scenarios,
    }
    if args.timings:
        report["timings"] = {"sweep": elapsed}
    validate(report)
    _emit(dumps(report), args.out)
    if args.csv_prefix:
        times = [[s["gamma"], s["metrics"]["avg_time_amod"], s["metrics"]["avg_time_private"],
                  s["metrics"]["avg_time_total"], s["converged"]] for s in scenarios]
        Path(f"{args.csv_prefix}_times.csv").write_text(csv_table(
            ["gamma", "avg_time_amod", "avg_time_private", "avg_time_total", "converged"], times))
        modes = [[s["gamma"]] + [s["metrics"]["flow_by_mode"][k] for k in
                                 ("amod_road", "rebalancing", "private", "walk")]
                 for s in scenarios]
        Path(f"{args.csv_prefix}_modes.csv").write_text(csv_table(
            ["gamma", "amod_road", "rebalancing", "private", "walk"], modes))
    return EXIT_OK if all(s["converged"] for s in scenarios) else EXIT_NONCONVERGED


# -- recover -----------------------------------------------------------------

def _flows_from_report(path, graph, gamma):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    flows = doc.get("flows")
    if flows is None:
        cands = [s for s in doc.get("scenarios", []) if "flows" in s
                 and (gamma is None or abs(s["gamma"] - gamma) < 1e-12)]
        if len(cands) != 1:
            raise InputError(f"{path}: no unique flow artifact (select one with --gamma; "
                             "equilibrium reports need --include-flows)")
        flows = cands[0]["flows"]
    arcs = [[a.tail, a.head, a.cls.name.lower()] for a in graph.arcs]
    if flows.get("arcs") != arcs or any(len(flows.get(k, [])) != graph.n_arcs
                                       for k in ("xu", "xr", "xp")):
        raise InputError(f"{path}: flow file does not match the network's arc list")
    return flows


def cmd_recover(args) -> int:
    net = _load(args)
    g = net.graph
    flows = _flows_from_report(args.flows, g, args.gamma)
    xu, xr, xp = (np.asarray(flows[k], dtype=float) for k in ("xu", "xr", "xp"))
    problem = AmodProblem(g, [], xp, None, rebalancing=False)
    cost = problem.arc_times(xu + xr + xp)
    fits = []
    for w in flows["od"]:
        if w["demand"] <= 0:
            continue
        row = np.zeros(g.n_arcs)
        for a, v in w["flow"].items():
            row[int(a)] = v
        fits.append(recover_od_routes(g, row, ODPair(w["o"], w["d"], w["demand"]), cost,
                                      xi=args.xi, max_routes=args.max_routes))
    od_set = detect_rebalance_ods(g, np.maximum(xr, 0.0))
    if args.rho is not None and od_set.pairs:
        od_set = prune_od_candidates(od_set, free_flow_times(g, od_set.origins,
                                                              od_set.destinations), args.rho)
    reb = recover_rebalance_routes(g, np.maximum(xr, 0.0), od_set, cost, xi=args.xi,
                                   max_routes=args.max_routes)
    config = _config_dict(args, "recover")
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "recover",
        "config": config,
        "config_hash": config_hash({"config": config, "network": file_sha256(args.network),
                                    "flows": file_sha256(args.flows)}),
        "network": _network_meta(args.network, g),
        "od_routes": [f.to_json() for f in fits],
        "rebalancing": {"candidate_pairs": [list(p) for p in od_set.pairs],
                        "routes": [f.to_json() for f in reb.fits],
                        "residual": reb.residual, "converged": reb.converged},
    }
    validate(report)
    _emit(dumps(report), args.out)
    ok = reb.converged and all(f.converged for f in fits)
    return EXIT_OK if ok else EXIT_NONCONVERGED


# -- argument parsing ----------------------------------------------------------

_NOT_CONFIG = {"out", "func", "timings", "verbose", "csv_prefix", "network", "flows",
               "private_flow", "segments", "speeds", "links", "condense"}


def _config_dict(args, command: str) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}
    cfg["command"] = command
    return cfg


def _model_flags(p, default_model="cars3"):
    p.add_argument("--model", choices=MODELS, default=default_model)
    p.add_argument("--lam", type=float, default=0.1, help="rebalancing regulariser weight")
    p.add_argument("--no-rebalance", action="store_true")
    p.add_argument("--update-cost", action="store_true",
                   help="rebalancing cost from congested rather than free-flow times")
    p.add_argument("--qp-tol", type=float, default=1e-9)
    p.add_argument("--routing-tol", type=float, default=1e-6)
    p.add_argument("--fit-range", type=float, default=DEFAULT_FIT_RANGE,
                   help="surrogate fit range, in capacities")
    p.add_argument("--beta", type=float)
    p.add_argument("--theta1", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--theta2", type=float)
    p.add_argument("--walk-speed", type=float, help="walk-layer speed in mph")
    p.add_argument("--timings", action="store_true", help="include wall-clock timings")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amodflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a network file from raw data")
    p.add_argument("--segments")
    p.add_argument("--speeds")
    p.add_argument("--links", help="CSV mapping link_id to tail/head")
    p.add_argument("--network", help="existing network JSON")
    p.add_argument("--condense", help="hubs JSON: {hubs: [...], edges?: [...], zones?: [...]}")
    p.add_argument("--synthetic-demand", choices=["uniform", "gravity"])
    p.add_argument("--total-demand", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--walk-speed", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("solve", help="solve one AMoD scenario with fixed private flow")
    p.add_argument("network")
    _model_flags(p)
    p.add_argument("--gamma", type=float, default=1.0,
                   help="AMoD share when the file carries total demand")
    p.add_argument("--private-flow", help="JSON with an arc-indexed 'xp' list")
    p.add_argument("--compare-exact", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("equilibrium", help="mixed AMoD/private equilibrium, optionally swept")
    p.add_argument("network")
    _model_flags(p)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--gamma-sweep", help="start:stop:step")
    p.add_argument("--tap-tol", type=float, default=1e-4)
    p.add_argument("--tap-max-iter", type=int, default=2000)
    p.add_argument("--eq-tol", type=float, default=1e-3)
    p.add_argument("--max-outer", type=int, default=20)
    p.add_argument("--include-flows", action="store_true")
    p.add_argument("--csv-prefix", help="write <prefix>_times.csv and <prefix>_modes.csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("recover", help="route decomposition of a solved flow")
    p.add_argument("network")
    p.add_argument("--flows", required=True, help="solve or equilibrium report")
    p.add_argument("--gamma", type=float, help="scenario to use from an equilibrium report")
    p.add_argument("--xi", type=float, default=1e-6)
    p.add_argument("--rho", type=float)
    p.add_argument("--max-routes", type=int, default=20)
    p.add_argument("--walk-speed", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_recover)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (InfeasibleFlow, Unreachable) as exc:
        code, kind, msg = EXIT_INFEASIBLE, "infeasible", str(exc)
    except (InputError, NetworkError, ValueError) as exc:
        code, kind, msg = EXIT_INPUT, "input", str(exc)
    sys.stderr.write(f"error: {msg}\n")
    sys.stdout.write(json.dumps({"error": {"type": kind, "code": code, "message": msg}},
                                sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
