"""Recover explicit routes from arc flows.

Per OD pair, candidate routes are added greedily in order of travel time
(deviation-based k-shortest simple paths, ties added together) and the route
shares are fitted by least squares on the probability simplex.  Rebalancing
flow has no OD labels, so origins and destinations are read off the node
potential (inflow minus outflow), far-apart pairs are pruned, and one joint
nonnegative fit distributes the supplies over the remaining pairs' routes.
This joint fit is our own concretisation of the rebalancing recovery.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterator

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import kernels
from .netcore import InfeasibleFlow, NetworkError, ODPair, SuperGraph, Unreachable, masked_costs
from .qp import solve_standard_qp

TIE_RTOL = 1e-9


@dataclass
class Route:
    arcs: tuple
    nodes: list
    time_hours: float


@dataclass
class RouteFit:
    od: tuple
    demand: float
    routes: list[Route]
    p: np.ndarray
    residual: float
    converged: bool = True

    def to_json(self) -> dict:
        return {
            "od": [self.od[0], self.od[1]],
            "demand": self.demand,
            "routes": [{"nodes": r.nodes, "arcs": list(r.arcs), "fraction": float(f),
                        "time_hours": r.time_hours} for r, f in zip(self.routes, self.p)],
            "residual": self.residual,
            "converged": self.converged,
        }


@dataclass
class RebalanceOdSet:
    supplies: dict            # origin node id -> supply (vph)
    deficits: dict            # destination node id -> deficit (vph)
    pairs: list = field(default_factory=list)

    @property
    def origins(self):
        return list(self.supplies)

    @property
    def destinations(self):
        return list(self.deficits)


# -- k shortest simple paths -------------------------------------------------

def _sp(graph: SuperGraph, cost, s: int, t: int):
    dist, pred = kernels.dijkstra(graph.indptr, graph.adj_arc, graph.head, cost, s)
    if not np.isfinite(dist[t]):
        return None
    path = []
    v = t
    while v != s:
        a = int(pred[v])
        path.append(a)
        v = int(graph.tail[a])
    path.reverse()
    return float(dist[t]), tuple(path)


def k_shortest_paths(graph: SuperGraph, arc_costs, origin: Hashable, destination: Hashable,
                     arc_filter=None) -> Iterator[tuple[tuple, float]]:
    """Yield simple paths (arc-id tuples) in nondecreasing cost (Yen)."""
    base = masked_costs(graph, arc_costs, arc_filter)
    s, t = graph.node_index(origin), graph.node_index(destination)
    first = _sp(graph, base, s, t)
    if first is None:
        raise Unreachable(f"{destination!r} is unreachable from {origin!r}")
    found = [first[1]]
    seen = {first[1]}
    yield first[1], first[0]
    cand: list = []
    while True:
        prev = found[-1]
        prev_nodes = [s] + [int(graph.head[a]) for a in prev]
        for i in range(len(prev)):
            root = prev[:i]
            spur = prev_nodes[i]
            cost = base.copy()
            for path in found:
                if path[:i] == root and len(path) > i:
                    cost[path[i]] = np.inf
            for v in prev_nodes[:i]:
                cost[graph.tail == v] = np.inf
                cost[graph.head == v] = np.inf
            res = _sp(graph, cost, spur, t)
            if res is None:
                continue
            full = root + res[1]
            if full in seen:
                continue
            seen.add(full)
            heapq.heappush(cand, (float(base[list(full)].sum()), full))
        if not cand:
            return
        c, path = heapq.heappop(cand)
        found.append(path)
        yield path, c


# -- simplex least squares ---------------------------------------------------

def simplex_lsq(M: np.ndarray, x: np.ndarray, tol: float = 1e-9, max_iter: int = 200000):
    """min ||M p - x|| over the probability simplex.

    Accelerated projected gradient, with an equality-constrained solve on the
    current support tried periodically to finish exactly.  Returns
    ``(p, fo_residual)`` where the first-order residual is
    ``||p - proj(p - grad/L)||_inf``.
    """
    n = M.shape[1]
    G = M.T @ M
    h = M.T @ x
    L = float(np.linalg.eigvalsh(G).max()) if n else 0.0
    if n == 1 or L <= 0:
        return np.full(n, 1.0 / max(n, 1)), 0.0

    def fo(p):
        return float(np.max(np.abs(p - kernels.project_simplex(p - (G @ p - h) / L))))

    def obj(p):
        r = M @ p - x
        return float(r @ r)

    def polish_one(p, cut):
        S = np.flatnonzero(p > cut)
        K = np.zeros((S.size + 1, S.size + 1))
        K[:S.size, :S.size] = G[np.ix_(S, S)]
        K[:S.size, -1] = 1.0
        K[-1, :S.size] = 1.0
        rhs = np.concatenate([h[S], [1.0]])
        z = np.linalg.lstsq(K, rhs, rcond=None)[0]
        if np.any(z[:S.size] < 0):
            return None
        q = np.zeros(n)
        q[S] = z[:S.size]
        return q

    def finish(p):
        # snap near-zero leftovers to an exact support solution when it certifies
        best, best_r = None, None
        for cut in (1e-12, 1e-9, 1e-6):
            q = polish_one(p, cut)
            if q is None:
                continue
            rq = fo(q)
            if rq < tol and (best is None or obj(q) < obj(best)):
                best, best_r = q, rq
        return best, best_r

    p = np.full(n, 1.0 / n)
    yk = p.copy()
    tk = 1.0
    for it in range(max_iter):
        p_new = kernels.project_simplex(yk - (G @ yk - h) / L)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        yk = p_new + (tk - 1) / t_new * (p_new - p)
        if (p_new - p) @ (p_new - yk) > 0:   # objective went up: restart momentum
            yk = p_new.copy()
            t_new = 1.0
        p, tk = p_new, t_new
        if it % 25 == 0:
            q, rq = finish(p)
            if q is not None and obj(q) <= obj(p):
                return q, rq
            r = fo(p)
            if r < tol:
                return p, r
    return p, fo(p)


def _incidence(n_arcs: int, routes: list[tuple]) -> np.ndarray:
    A = np.zeros((n_arcs, len(routes)))
    for j, r in enumerate(routes):
        A[list(r), j] = 1.0
    return A


def _make_route(graph: SuperGraph, arcs: tuple, cost) -> Route:
    return Route(tuple(int(a) for a in arcs), graph.path_nodes(arcs), float(np.sum(cost[list(arcs)])))


class _RouteStream:
    """Next-shortest routes for one OD, handing out ties together."""

    def __init__(self, graph, cost, o, t, arc_filter):
        self.gen = k_shortest_paths(graph, cost, o, t, arc_filter)
        self.pending = None
        self.exhausted = False

    def next_batch(self) -> list:
        if self.exhausted:
            return []
        first = self.pending if self.pending is not None else next(self.gen, None)
        self.pending = None
        if first is None:
            self.exhausted = True
            return []
        batch = [first]
        for nxt in self.gen:
            if nxt[1] <= first[1] * (1 + TIE_RTOL) + 1e-15:
                batch.append(nxt)
            else:
                self.pending = nxt
                break
        else:
            self.exhausted = True
        return batch


def recover_od_routes(graph: SuperGraph, od_flow, od_pair: ODPair, arc_costs, xi: float = 1e-6,
                      max_routes: int = 20, arc_filter=None) -> RouteFit:
    """Greedy route recovery for one OD (Algorithm: add next-shortest, refit).

    ``od_flow`` is that OD's optimal per-arc flow; ``arc_costs`` rank the
    candidate routes (typically the congested travel times at the solution).
    Stops when ``||A p d - x|| <= xi`` or ``max_routes`` are in use (flagged).
    """
    d = float(od_pair.demand)
    if not d > 0:
        raise NetworkError("route recovery needs positive OD demand")
    if not xi > 0:
        raise NetworkError("xi must be positive")
    x = np.asarray(od_flow, dtype=float)
    cost = np.asarray(arc_costs, dtype=float)
    stream = _RouteStream(graph, cost, od_pair.origin, od_pair.destination, arc_filter)
    paths: list[tuple] = []
    p = np.zeros(0)
    residual = float(np.linalg.norm(x))
    converged = False
    while len(paths) < max_routes:
        batch = stream.next_batch()
        if not batch:
            break
        paths.extend(path for path, _ in batch[:max_routes - len(paths)])
        A = _incidence(graph.n_arcs, paths)
        p, _ = simplex_lsq(A * d, x)
        residual = float(np.linalg.norm(A @ p * d - x))
        if residual <= xi:
            converged = True
            break
    routes = [_make_route(graph, r, cost) for r in paths]
    return RouteFit((od_pair.origin, od_pair.destination), d, routes, p, residual, converged)


# -- rebalancing flows -------------------------------------------------------

def node_potential(graph: SuperGraph, xr) -> np.ndarray:
    """Inflow minus outflow of rebalancing flow on road arcs, per node."""
    return -graph.divergence(np.where(graph.road, xr, 0.0))


def detect_rebalance_ods(graph: SuperGraph, xr, zero_frac: float = 1e-7) -> RebalanceOdSet:
    """Nodes with negative potential are origins (supply), positive are destinations."""
    xr = np.asarray(xr, dtype=float)
    if np.any(xr < 0):
        raise NetworkError("rebalancing flow must be nonnegative")
    psi = node_potential(graph, xr)
    eps = zero_frac * float(np.where(graph.road, xr, 0.0).sum())
    supplies, deficits = {}, {}
    for j in range(graph.n_nodes):
        if psi[j] < -eps:
            supplies[graph.nodes[j].id] = float(-psi[j])
        elif psi[j] > eps:
            deficits[graph.nodes[j].id] = float(psi[j])
    pairs = [(o, d) for o in supplies for d in deficits]
    return RebalanceOdSet(supplies, deficits, pairs)


def free_flow_times(graph: SuperGraph, origins, destinations) -> dict:
    """Shortest road travel time at free flow for every (origin, destination)."""
    cost = np.where(graph.road, graph.t0, np.inf)
    out = {}
    for o in origins:
        dist, _ = kernels.dijkstra(graph.indptr, graph.adj_arc, graph.head, cost,
                                   graph.node_index(o))
        for d in destinations:
            out[(o, d)] = float(dist[graph.node_index(d)])
    return out


def prune_od_candidates(od_set: RebalanceOdSet, shortest_times: dict, rho: float) -> RebalanceOdSet:
    """Drop pairs whose time exceeds the origin's nearest destination by more than rho."""
    if not rho >= 0:
        raise NetworkError("rho must be nonnegative")
    keep = []
    for o in od_set.supplies:
        etas = {d: shortest_times[(o, d)] for oo, d in od_set.pairs if oo == o}
        finite = [v for v in etas.values() if np.isfinite(v)]
        if not finite:
            raise Unreachable(f"rebalancing origin {o!r} reaches no destination")
        kappa = min(finite)
        for d, eta in etas.items():
            if not np.isfinite(eta):
                continue
            ratio = 0.0 if eta == kappa else (math.inf if kappa == 0 else eta / kappa - 1.0)
            if ratio <= rho:
                keep.append((o, d))
    return RebalanceOdSet(dict(od_set.supplies), dict(od_set.deficits), keep)


@dataclass
class RebalanceRecovery:
    fits: list[RouteFit]
    residual: float
    converged: bool


def _check_matching(od_set: RebalanceOdSet):
    pairs = od_set.pairs
    origins, dests = od_set.origins, od_set.destinations
    if not pairs:
        raise InfeasibleFlow("no rebalancing OD pair survives pruning")
    A_eq = np.zeros((len(origins) + len(dests), len(pairs)))
    for j, (o, d) in enumerate(pairs):
        A_eq[origins.index(o), j] = 1.0
        A_eq[len(origins) + dests.index(d), j] = 1.0
    b_eq = np.array([od_set.supplies[o] for o in origins] + [od_set.deficits[d] for d in dests])
    res = linprog(np.zeros(len(pairs)), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise InfeasibleFlow("supplies cannot be matched to deficits over the remaining "
                             "OD pairs; increase rho")


def _polish_support(M, E, b, x, y):
    """Equality-constrained least squares restricted to the support of an
    interior-point solution; kept only if it stays nonnegative and fits better."""
    scale = max(1.0, float(np.abs(y).max()))
    best, best_res = y, float(np.linalg.norm(M @ y - x))
    for cut in (1e-9, 1e-7, 1e-5):
        S = np.flatnonzero(y > cut * scale)
        if S.size == 0:
            continue
        K = np.block([[M[:, S].T @ M[:, S], E[:, S].T], [E[:, S], np.zeros((E.shape[0],) * 2)]])
        rhs = np.concatenate([M[:, S].T @ x, b])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:S.size]
        if np.any(sol < -1e-12 * scale):
            continue
        cand = np.zeros_like(y)
        cand[S] = np.maximum(sol, 0.0)
        if np.abs(E @ cand - b).max() > 1e-9 * scale:
            continue
        r = float(np.linalg.norm(M @ cand - x))
        if r < best_res:
            best, best_res = cand, r
    return best


def recover_rebalance_routes(graph: SuperGraph, xr, od_set: RebalanceOdSet, arc_costs,
                             xi: float = 1e-6, max_routes: int = 20) -> RebalanceRecovery:
    """Joint fit of route flows over all candidate pairs to the aggregate x^r.

    Route flows are nonnegative and the flows leaving each origin (entering
    each destination) must equal its supply (deficit).
    """
    xr = np.where(graph.road, np.asarray(xr, dtype=float), 0.0)
    if not od_set.supplies:
        return RebalanceRecovery([], float(np.linalg.norm(xr)), True)
    _check_matching(od_set)
    cost = np.asarray(arc_costs, dtype=float)
    origins, dests = od_set.origins, od_set.destinations
    streams = [_RouteStream(graph, cost, o, d, graph.road) for o, d in od_set.pairs]
    paths: list[list[tuple]] = [[] for _ in od_set.pairs]
    b = np.array([od_set.supplies[o] for o in origins] + [od_set.deficits[d] for d in dests])
    y = np.zeros(0)
    residual = float(np.linalg.norm(xr))
    converged = False
    while True:
        grew = False
        for k, st in enumerate(streams):
            room = max_routes - len(paths[k])
            if room > 0:
                batch = st.next_batch()[:room]
                paths[k].extend(path for path, _ in batch)
                grew = grew or bool(batch)
        if not grew:
            break
        flat = [(k, r) for k in range(len(paths)) for r in paths[k]]
        M = _incidence(graph.n_arcs, [r for _, r in flat])
        E = np.zeros((b.size, len(flat)))
        for j, (k, _) in enumerate(flat):
            o, d = od_set.pairs[k]
            E[origins.index(o), j] = 1.0
            E[len(origins) + dests.index(d), j] = 1.0
        res = solve_standard_qp(sp.csc_matrix(M.T @ M), -(M.T @ xr), sp.csr_matrix(E), b,
                                tol=1e-11)
        y = _polish_support(M, E, b, xr, np.maximum(res.z, 0.0))
        residual = float(np.linalg.norm(M @ y - xr))
        if residual <= xi:
            converged = True
            break
    fits = []
    j = 0
    scale = max(1.0, float(b.max()))
    for k, (o, d) in enumerate(od_set.pairs):
        yk = y[j:j + len(paths[k])]
        j += len(paths[k])
        dk = float(yk.sum())
        if dk <= 1e-9 * scale:
            continue
        routes = [_make_route(graph, r, cost) for r in paths[k]]
        fits.append(RouteFit((o, d), dk, routes, yk / dk, residual, converged))
    return RebalanceRecovery(fits, residual, converged)
