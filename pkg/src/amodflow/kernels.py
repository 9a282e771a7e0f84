"""Hot inner loops: label-setting shortest paths, all-or-nothing loading and
Euclidean projection onto the simplex.

Every kernel is written once in the numba-compatible subset of Python.  When
numba is importable and ``AMOD_DISABLE_NUMBA`` is unset (or ``0``) the kernels
are compiled with ``@njit``; otherwise the very same functions run as plain
Python over numpy arrays.  Compiled dispatchers keep the uncompiled source on
``.py_func``, which the parity tests and the benchmark use.
"""

from __future__ import annotations

import heapq
import os

import numpy as np

_DISABLED = os.environ.get("AMOD_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    NUMBA_ENABLED = True

    def jit(fn):
        return njit(cache=True, nogil=True)(fn)

except ImportError:
    NUMBA_ENABLED = False

    def jit(fn):
        fn.py_func = fn
        return fn


@jit
def dijkstra(indptr, adj_arc, arc_head, cost, source):
    """Single-source shortest paths over a CSR out-adjacency.

    Arcs whose cost is ``inf`` are treated as absent.  Ties are resolved by
    settling nodes in (distance, node index) order and keeping the first
    strictly improving predecessor, so the tree is deterministic.

    Returns ``(dist, pred_arc)``; unreachable nodes have ``dist == inf`` and
    ``pred_arc == -1``.
    """
    n = indptr.shape[0] - 1
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    dist[source] = 0.0
    heap = [(0.0, np.int64(source))]
    while len(heap) > 0:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for k in range(indptr[u], indptr[u + 1]):
            a = adj_arc[k]
            c = cost[a]
            if c == np.inf:
                continue
            v = arc_head[a]
            nd = d + c
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = a
                heapq.heappush(heap, (nd, np.int64(v)))
    return dist, pred


@jit
def aon_per_od(indptr, adj_arc, arc_tail, arc_head, cost, origins, dests, demands):
    """All-or-nothing loading that keeps one row per OD pair.

    Shortest-path trees are shared between consecutive ODs with the same
    origin.  Returns ``(flows[n_od, n_arcs], sp_cost[n_od], bad)`` where
    ``bad`` is the index of the first unreachable OD with positive demand,
    or -1.
    """
    n_od = origins.shape[0]
    n_arcs = arc_head.shape[0]
    flows = np.zeros((n_od, n_arcs))
    sp_cost = np.zeros(n_od)
    last_origin = -1
    dist = np.empty(0)
    pred = np.empty(0, dtype=np.int64)
    for k in range(n_od):
        o = origins[k]
        if o != last_origin:
            dist, pred = dijkstra(indptr, adj_arc, arc_head, cost, o)
            last_origin = o
        t = dests[k]
        sp_cost[k] = dist[t]
        if demands[k] <= 0.0:
            continue
        if dist[t] == np.inf:
            return flows, sp_cost, k
        v = t
        while v != o:
            a = pred[v]
            flows[k, a] += demands[k]
            v = arc_tail[a]
    return flows, sp_cost, -1


@jit
def aon_total(indptr, adj_arc, arc_tail, arc_head, cost, origins, dests, demands):
    """All-or-nothing loading summed over ODs; same contract as aon_per_od."""
    n_od = origins.shape[0]
    n_arcs = arc_head.shape[0]
    flow = np.zeros(n_arcs)
    sp_cost = np.zeros(n_od)
    last_origin = -1
    dist = np.empty(0)
    pred = np.empty(0, dtype=np.int64)
    for k in range(n_od):
        o = origins[k]
        if o != last_origin:
            dist, pred = dijkstra(indptr, adj_arc, arc_head, cost, o)
            last_origin = o
        t = dests[k]
        sp_cost[k] = dist[t]
        if demands[k] <= 0.0:
            continue
        if dist[t] == np.inf:
            return flow, sp_cost, k
        v = t
        while v != o:
            a = pred[v]
            flow[a] += demands[k]
            v = arc_tail[a]
    return flow, sp_cost, -1


@jit
def project_simplex(v):
    """Euclidean projection of ``v`` onto {p >= 0, sum(p) = 1} (sort-based)."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = 0.0
    tau = 0.0
    for i in range(n):
        css += u[i]
        t = (css - 1.0) / (i + 1)
        if u[i] - t > 0.0:
            tau = t
    out = np.empty(n)
    for i in range(n):
        out[i] = max(v[i] - tau, 0.0)
    return out
