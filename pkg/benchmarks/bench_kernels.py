#!/usr/bin/env python3
"""Compiled vs pure-Python kernels.

Each backend runs in its own interpreter (AMOD_DISABLE_NUMBA selects it), so
nested kernel calls use the same backend throughout.  Compilation happens in
a warm-up call and is excluded from the timings.

    python3 benchmarks/bench_kernels.py --side 12 --repeat 5
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def grid_network(side, seed):
    from amodflow.netcore import ODPair, build_supergraph

    rng = np.random.default_rng(seed)
    name = lambda i, j: f"n{i}_{j}"
    nodes = [name(i, j) for i in range(side) for j in range(side)]
    arcs = []
    for i in range(side):
        for j in range(side):
            for di, dj in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                a, b = i + di, j + dj
                if 0 <= a < side and 0 <= b < side:
                    arcs.append((name(i, j), name(a, b), float(rng.uniform(0.02, 0.1)),
                                 float(rng.choice([600.0, 800.0, 1000.0]))))
    g = build_supergraph(nodes, arcs)
    picks = rng.choice(len(nodes), size=(4 * side, 2))
    od = [ODPair(nodes[o], nodes[d], float(rng.uniform(50, 300))) for o, d in picks if o != d]
    return g, od


def run_backend(side, repeat, seed):
    from amodflow import kernels
    from amodflow.tap import TapProblem, solve_tap

    g, od = grid_network(side, seed)
    arr = g.od_arrays(od)
    cost = g.t0.copy()
    v = np.random.default_rng(seed).normal(size=200)

    cases = {
        "dijkstra": lambda: kernels.dijkstra(g.indptr, g.adj_arc, g.head, cost, 0),
        "aon_total": lambda: kernels.aon_total(g.indptr, g.adj_arc, g.tail, g.head, cost,
                                               arr.origins, arr.dests, arr.demands),
        "project_simplex": lambda: kernels.project_simplex(v),
        "msa_200": lambda: solve_tap(TapProblem(g, od), tol=0.0, max_iter=200),
    }
    out = {}
    for key, fn in cases.items():
        fn()
        n = 1 if key == "msa_200" else 20
        out[key] = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
    return {"numba": kernels.NUMBA_ENABLED, "arcs": g.n_arcs, "ods": len(od), "seconds": out}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=12, help="grid side length (nodes)")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(run_backend(args.side, args.repeat, args.seed)))
        return

    results = {}
    for label, flag in (("numba", "0"), ("python", "1")):
        env = {**os.environ, "AMOD_DISABLE_NUMBA": flag}
        proc = subprocess.run([sys.executable, __file__, "--worker", "--side", str(args.side),
                               "--repeat", str(args.repeat), "--seed", str(args.seed)],
                              env=env, capture_output=True, text=True, check=True)
        results[label] = json.loads(proc.stdout)
    if not results["numba"]["numba"]:
        print("numba unavailable: both columns are the pure-Python backend")
    r = results["numba"]
    print(f"grid {args.side}x{args.side}: {r['arcs']} arcs, {r['ods']} OD pairs")
    print(f"{'kernel':<18}{'numba [ms]':>12}{'python [ms]':>13}{'speed-up':>10}")
    for key in r["seconds"]:
        a, b = r["seconds"][key], results["python"]["seconds"][key]
        print(f"{key:<18}{1e3 * a:>12.3f}{1e3 * b:>13.3f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
