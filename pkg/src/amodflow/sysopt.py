"""System-centric AMoD routing and rebalancing.

Two quadratic relaxations of the joint routing/rebalancing problem (2-line
``cars`` and 3-line ``cars3``), the exact convex routing problem without
rebalancing (Frank-Wolfe), and the disjoint routing-then-rebalancing scheme.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import optimize
from scipy.sparse.csgraph import breadth_first_order

from .latency import BprParams, PwaParams, bpr_derivative, bpr_time, slack2, slack3
from .netcore import (ArcClass, NetworkError, ODPair, SuperGraph, Unreachable,
                      all_or_nothing_per_od, min_cost_flow)
from .qp import QpResult, solve_standard_qp

log = logging.getLogger(__name__)

# linear cost added in the QP to zero-time arcs so zero-cost cycles
# (e.g. a free switch pair) do not leave the optimal face unbounded
ZERO_COST_EPS = 1e-9


@dataclass
class AmodProblem:
    graph: SuperGraph
    od: list[ODPair]
    private_flow: np.ndarray | None = None
    pwa: PwaParams | None = None
    lam: float = 0.1
    rebalancing: bool = True
    rebalancing_cost: np.ndarray | None = None
    alpha: float = 0.15
    power: float = 4.0

    def __post_init__(self):
        g = self.graph
        xp = np.zeros(g.n_arcs) if self.private_flow is None else np.asarray(self.private_flow, float)
        if xp.shape != (g.n_arcs,):
            raise NetworkError("private flow must have one entry per arc")
        if np.any(xp < 0):
            raise NetworkError("private flow must be nonnegative")
        if np.any(xp[~g.road] != 0):
            raise NetworkError("private flow must be zero off road arcs")
        self.private_flow = xp
        if self.rebalancing_cost is None:
            if self.rebalancing and not self.lam > 0:
                raise NetworkError("lambda must be positive when rebalancing is on")
            self.rebalancing_cost = np.where(g.road, self.lam * g.t0, 0.0)
        else:
            self.rebalancing_cost = np.asarray(self.rebalancing_cost, dtype=float)

    @property
    def bpr(self) -> BprParams:
        g = self.graph
        return BprParams(np.where(g.road, g.t0, 1.0), np.where(g.road, g.m, 1.0),
                         self.alpha, self.power)

    def arc_times(self, x_total) -> np.ndarray:
        g = self.graph
        return np.where(g.road, bpr_time(self.bpr, np.where(g.road, x_total, 0.0)), g.fixed_time)

    def with_private_flow(self, xp) -> "AmodProblem":
        return AmodProblem(self.graph, self.od, xp, self.pwa, self.lam, self.rebalancing,
                           self.rebalancing_cost, self.alpha, self.power)


@dataclass
class AmodSolution:
    od_flows: np.ndarray                # (n_od, n_arcs), caller's OD order
    xu: np.ndarray
    xr: np.ndarray
    private_flow: np.ndarray
    slacks: dict = field(default_factory=dict)
    objective_model: float = 0.0
    objective_true: float = 0.0
    certificate: float = 0.0            # KKT residual or relative duality gap
    converged: bool = True
    iterations: int = 0
    method: str = ""

    @property
    def total_flow(self) -> np.ndarray:
        return self.xu + self.xr + self.private_flow


# -- objectives --------------------------------------------------------------

def evaluate_true_objective(solution: AmodSolution, problem: AmodProblem) -> float:
    """User travel time under BPR at the total flow plus the rebalancing cost."""
    t = problem.arc_times(solution.xu + solution.xr + problem.private_flow)
    return float(t @ solution.xu + problem.rebalancing_cost @ solution.xr)


def surrogate_objective(problem: AmodProblem, xu, xr, slacks: dict) -> float:
    """Relaxed objective at given flows and slacks (road, walk and regulariser)."""
    g, pwa = problem.graph, problem.pwa
    r = g.road
    t0, m = g.t0[r], g.m[r]
    xe = problem.private_flow[r]
    val = float(g.fixed_time[~r] @ xu[~r] + problem.rebalancing_cost @ xr)
    val += float(pwa.a * t0 @ xu[r])
    if pwa.n_lines == 2:
        th = pwa.theta1 * m
        e = slacks["eps"][r]
        val += float(np.sum(pwa.b(m) * t0 * e * (e + th - xe)))
    else:
        th1, th2 = pwa.theta1 * m, pwa.theta2 * m
        e1, e2 = slacks["eps1"][r], slacks["eps2"][r]
        val += float(np.sum(pwa.b(m) * t0 * e1 * (e1 + th1 - xe)))
        val += float(np.sum(pwa.c(m) * t0 * e2 * (e2 + th2 - xe)))
        val += float(np.sum(pwa.b(m) * t0 * (th2 - th1) * e2))
    return val


def tight_slacks(problem: AmodProblem, x_total) -> dict:
    g, pwa = problem.graph, problem.pwa
    th1, th2 = pwa.thresholds(np.where(g.road, g.m, 1.0))
    x = np.where(g.road, x_total, 0.0)
    if pwa.n_lines == 2:
        return {"eps": np.where(g.road, slack2(th1, x), 0.0)}
    e1, e2 = slack3(th1, th2, x)
    return {"eps1": np.where(g.road, e1, 0.0), "eps2": np.where(g.road, e2, 0.0)}


# -- QP assembly -------------------------------------------------------------

@dataclass
class QpSpec:
    """Standard-form QP plus the column layout needed to read flows back."""

    problem: AmodProblem
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    od_arcs: list           # per OD: arc ids of its columns (empty if no demand)
    od_start: list          # per OD: first column
    xr_arcs: np.ndarray     # arc ids with a rebalancing column
    xr_start: int
    slack_cols: dict        # name -> (arc ids, first column)
    model: str

    @property
    def n_vars(self) -> int:
        return self.q.size


def _admissible_arcs(g: SuperGraph, adj: sp.csr_matrix, adj_t: sp.csr_matrix, o: int, t: int):
    fwd = breadth_first_order(adj, o, directed=True, return_predecessors=False)
    bwd = breadth_first_order(adj_t, t, directed=True, return_predecessors=False)
    if t not in set(fwd.tolist()):
        raise Unreachable(f"OD {g.nodes[o].id!r}->{g.nodes[t].id!r} has no path in the supergraph")
    reach = np.zeros(g.n_nodes, bool)
    reach[fwd] = True
    coreach = np.zeros(g.n_nodes, bool)
    coreach[bwd] = True
    keep = reach[g.tail] & coreach[g.head] & (g.head != o) & (g.tail != t)
    return np.flatnonzero(keep)


class _Builder:
    def __init__(self):
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []
        self.n_rows = 0
        self.lin: list[np.ndarray] = []
        self.quad: list[np.ndarray] = []
        self.n_cols = 0

    def add_cols(self, lin, quad=None) -> int:
        start = self.n_cols
        lin = np.asarray(lin, dtype=float)
        self.lin.append(lin)
        self.quad.append(np.zeros(lin.size) if quad is None else np.asarray(quad, float))
        self.n_cols += lin.size
        return start

    def add_rows(self, rows, cols, vals, rhs):
        self.rows.append(np.asarray(rows) + self.n_rows)
        self.cols.append(np.asarray(cols))
        self.vals.append(np.asarray(vals, dtype=float))
        self.rhs.append(np.asarray(rhs, dtype=float))
        self.n_rows += len(rhs)

    def matrices(self):
        cat = (lambda xs, dt=float: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
        A = sp.csr_matrix((cat(self.vals), (cat(self.rows, int), cat(self.cols, int))),
                          shape=(self.n_rows, self.n_cols))
        return sp.diags(cat(self.quad)).tocsc(), cat(self.lin), A, cat(self.rhs)


def _assemble(problem: AmodProblem, model: str) -> QpSpec:
    g, pwa = problem.graph, problem.pwa
    if pwa is None:
        raise NetworkError("surrogate parameters missing; fit them with latency.fit_pwa")
    if (model == "cars") != (pwa.n_lines == 2):
        raise NetworkError(f"model {model} needs a {2 if model == 'cars' else 3}-line fit")
    road = g.road
    t0 = g.t0
    m = np.where(road, g.m, 1.0)
    xp = problem.private_flow
    unit_cost = np.where(road, pwa.a * t0, g.fixed_time)
    unit_cost = np.where(unit_cost > 0, unit_cost, ZERO_COST_EPS)

    adj = sp.csr_matrix((np.ones(g.n_arcs), (g.tail, g.head)), shape=(g.n_nodes,) * 2)
    adj_t = adj.T.tocsr()
    B = _Builder()
    od_arcs, od_start = [], []
    load_cols = [[] for _ in range(g.n_arcs)]     # columns contributing to road flow
    div_terms = []                                 # (col, tail, head) for rebalancing rows
    for w in problem.od:
        o, t = g.node_index(w.origin), g.node_index(w.destination)
        if w.demand <= 0:
            od_arcs.append(np.zeros(0, dtype=np.int64))
            od_start.append(B.n_cols)
            continue
        arcs = _admissible_arcs(g, adj, adj_t, o, t)
        start = B.add_cols(unit_cost[arcs])
        cols = start + np.arange(arcs.size)
        od_arcs.append(arcs)
        od_start.append(start)
        nodes, local = np.unique(np.concatenate([g.tail[arcs], g.head[arcs], [o, t]]),
                                 return_inverse=True)
        lt, lh = local[:arcs.size], local[arcs.size:2 * arcs.size]
        rhs = np.zeros(nodes.size)
        rhs[np.searchsorted(nodes, o)] = w.demand
        rhs[np.searchsorted(nodes, t)] = -w.demand
        B.add_rows(np.concatenate([lt, lh]), np.concatenate([cols, cols]),
                   np.concatenate([np.ones(arcs.size), -np.ones(arcs.size)]), rhs)
        for a, c in zip(arcs, cols):
            if road[a]:
                load_cols[a].append(c)
                div_terms.append((c, a))

    xr_arcs = np.flatnonzero(road) if problem.rebalancing else np.zeros(0, dtype=np.int64)
    xr_start = B.add_cols(problem.rebalancing_cost[xr_arcs])
    for k, a in enumerate(xr_arcs):
        load_cols[a].append(xr_start + k)
        div_terms.append((xr_start + k, a))

    if problem.rebalancing:
        rn = np.flatnonzero(g.road_nodes)
        pos = np.full(g.n_nodes, -1)
        pos[rn] = np.arange(rn.size)
        cols = np.array([c for c, _ in div_terms], dtype=np.int64)
        arcs = np.array([a for _, a in div_terms], dtype=np.int64)
        B.add_rows(np.concatenate([pos[g.tail[arcs]], pos[g.head[arcs]]]),
                   np.concatenate([cols, cols]),
                   np.concatenate([np.ones(cols.size), -np.ones(cols.size)]), np.zeros(rn.size))

    # slacks only where some decision variable loads the arc
    loaded = np.array([bool(load_cols[a]) for a in range(g.n_arcs)]) & road
    sa = np.flatnonzero(loaded)
    slack_cols = {}
    bt0 = pwa.b(m) * t0

    def flow_row(arc_list, slack_terms, rhs):
        rows, cols, vals = [], [], []
        for r, a in enumerate(arc_list):
            for c in load_cols[a]:
                rows.append(r)
                cols.append(c)
                vals.append(-1.0)
            for c, v in slack_terms(r):
                rows.append(r)
                cols.append(c)
                vals.append(v)
        B.add_rows(rows, cols, vals, rhs)

    if pwa.n_lines == 2:
        th = pwa.theta1 * m
        e0 = B.add_cols(bt0[sa] * (th[sa] - xp[sa]), 2 * bt0[sa])
        s0 = B.add_cols(np.zeros(sa.size))
        slack_cols["eps"] = (sa, e0)
        # eps - x - s = xp - theta
        flow_row(sa, lambda r: [(e0 + r, 1.0), (s0 + r, -1.0)], xp[sa] - th[sa])
    else:
        th1, th2 = pwa.theta1 * m, pwa.theta2 * m
        ct0 = pwa.c(m) * t0
        width = th2 - th1
        wide = sa[width[sa] > 1e-12 * m[sa]]
        e2 = B.add_cols(ct0[sa] * (th2[sa] - xp[sa]) + bt0[sa] * width[sa], 2 * ct0[sa])
        s2 = B.add_cols(np.zeros(sa.size))
        slack_cols["eps2"] = (sa, e2)
        flow_row(sa, lambda r: [(e2 + r, 1.0), (s2 + r, -1.0)], xp[sa] - th2[sa])
        e1 = B.add_cols(bt0[wide] * (th1[wide] - xp[wide]), 2 * bt0[wide])
        s1 = B.add_cols(np.zeros(wide.size))
        cap = B.add_cols(np.zeros(wide.size))
        slack_cols["eps1"] = (wide, e1)
        pos2 = {a: r for r, a in enumerate(sa)}
        # eps1 + eps2 - x - s1 = xp - theta1 ; eps1 + cap = theta2 - theta1
        flow_row(wide, lambda r: [(e1 + r, 1.0), (e2 + pos2[wide[r]], 1.0), (s1 + r, -1.0)],
                 xp[wide] - th1[wide])
        idx = np.arange(wide.size)
        B.add_rows(np.concatenate([idx, idx]), np.concatenate([e1 + idx, cap + idx]),
                   np.ones(2 * wide.size), width[wide])

    P, q, A, b = B.matrices()
    return QpSpec(problem, P, q, A, b, od_arcs, od_start, xr_arcs, xr_start, slack_cols, model)


def assemble_cars(problem: AmodProblem) -> QpSpec:
    """2-line relaxation: a*t0*x^u + b*t0*eps*(eps + theta - x^p) per road arc."""
    return _assemble(problem, "cars")


def assemble_cars3(problem: AmodProblem) -> QpSpec:
    """3-line relaxation with slacks eps1 (capped at theta2 - theta1) and eps2."""
    return _assemble(problem, "cars3")


def solve_qp(spec: QpSpec, tol: float = 1e-9, max_iter: int = 200) -> AmodSolution:
    problem = spec.problem
    g = problem.graph
    res: QpResult = solve_standard_qp(spec.P, spec.q, spec.A, spec.b, tol=tol, max_iter=max_iter)
    z = res.z
    od_flows = np.zeros((len(problem.od), g.n_arcs))
    for k, (arcs, start) in enumerate(zip(spec.od_arcs, spec.od_start)):
        od_flows[k, arcs] = z[start:start + arcs.size]
    xu = od_flows.sum(axis=0)
    xr = np.zeros(g.n_arcs)
    xr[spec.xr_arcs] = z[spec.xr_start:spec.xr_start + spec.xr_arcs.size]
    slacks = tight_slacks(problem, xu + xr + problem.private_flow)
    for name, (arcs, start) in spec.slack_cols.items():
        slacks[name][arcs] = z[start:start + arcs.size]
    sol = AmodSolution(od_flows, xu, xr, problem.private_flow.copy(), slacks,
                       certificate=res.kkt_residual, converged=res.converged,
                       iterations=res.iterations, method=spec.model)
    sol.objective_model = surrogate_objective(problem, xu, xr, slacks)
    sol.objective_true = evaluate_true_objective(sol, problem)
    if not res.converged:
        log.warning("%s QP stopped without certificate (KKT residual %.2e)", spec.model,
                    res.kkt_residual)
    return sol


# -- exact routing (no rebalancing) ------------------------------------------

def _routing_cost(problem: AmodProblem, xu) -> float:
    return float(problem.arc_times(xu + problem.private_flow) @ xu)


def _marginal_cost(problem: AmodProblem, xu) -> np.ndarray:
    g = problem.graph
    x = np.where(g.road, xu + problem.private_flow, 0.0)
    t = problem.arc_times(x)
    dt = np.where(g.road, bpr_derivative(problem.bpr, x), 0.0)
    return t + dt * xu


def _curvature(problem: AmodProblem, xu) -> np.ndarray:
    """Second derivative of x^u t(x^u + x^p) per arc (zero off road)."""
    g = problem.graph
    bpr = problem.bpr
    x = np.where(g.road, xu + problem.private_flow, 0.0)
    p = bpr.power
    u = x / bpr.m
    d1 = bpr.t0 * bpr.alpha * p * u ** (p - 1) / bpr.m
    if p == 1:
        d2 = np.zeros_like(x)
    else:
        d2 = bpr.t0 * bpr.alpha * p * (p - 1) * np.maximum(u, 1e-300) ** (p - 2) / bpr.m ** 2
    return np.where(g.road, 2 * d1 + xu * d2, 0.0)


class _RoutingPolytope:
    """Per-OD flow columns plus one aggregate load column per road arc,
    tied together by ``y_a - sum_w x^w_a = 0``."""

    def __init__(self, problem: AmodProblem):
        g = problem.graph
        adj = sp.csr_matrix((np.ones(g.n_arcs), (g.tail, g.head)), shape=(g.n_nodes,) * 2)
        adj_t = adj.T.tocsr()
        B = _Builder()
        self.od_arcs, self.od_start = [], []
        load = [[] for _ in range(g.n_arcs)]
        for w in problem.od:
            if w.demand <= 0:
                self.od_arcs.append(np.zeros(0, dtype=np.int64))
                self.od_start.append(B.n_cols)
                continue
            o, t = g.node_index(w.origin), g.node_index(w.destination)
            arcs = _admissible_arcs(g, adj, adj_t, o, t)
            start = B.add_cols(np.zeros(arcs.size))
            cols = start + np.arange(arcs.size)
            nodes, local = np.unique(np.concatenate([g.tail[arcs], g.head[arcs], [o, t]]),
                                     return_inverse=True)
            rhs = np.zeros(nodes.size)
            rhs[np.searchsorted(nodes, o)] = w.demand
            rhs[np.searchsorted(nodes, t)] = -w.demand
            B.add_rows(np.concatenate([local[:arcs.size], local[arcs.size:2 * arcs.size]]),
                       np.concatenate([cols, cols]),
                       np.concatenate([np.ones(arcs.size), -np.ones(arcs.size)]), rhs)
            for a, c in zip(arcs, cols):
                if g.road[a]:
                    load[a].append(c)
            self.od_arcs.append(arcs)
            self.od_start.append(start)
        self.n_od_cols = B.n_cols
        self.y_arcs = np.array([a for a in range(g.n_arcs) if load[a]], dtype=np.int64)
        self.y_start = B.add_cols(np.zeros(self.y_arcs.size))
        rows, cols, vals = [], [], []
        for r, a in enumerate(self.y_arcs):
            rows += [r] * (len(load[a]) + 1)
            cols += [self.y_start + r] + load[a]
            vals += [1.0] + [-1.0] * len(load[a])
        B.add_rows(rows, cols, vals, np.zeros(self.y_arcs.size))
        _, _, self.A, self.b = B.matrices()
        self.n = B.n_cols
        # column -> arc map for the per-OD block
        self.col_arc = np.concatenate(self.od_arcs) if self.od_arcs else np.zeros(0, np.int64)

    def pack(self, X: np.ndarray) -> np.ndarray:
        z = np.zeros(self.n)
        for k, (arcs, start) in enumerate(zip(self.od_arcs, self.od_start)):
            z[start:start + arcs.size] = X[k, arcs]
        z[self.y_start:] = X.sum(axis=0)[self.y_arcs]
        return z

    def unpack(self, z: np.ndarray, n_arcs: int) -> np.ndarray:
        X = np.zeros((len(self.od_arcs), n_arcs))
        for k, (arcs, start) in enumerate(zip(self.od_arcs, self.od_start)):
            X[k, arcs] = np.maximum(z[start:start + arcs.size], 0.0)
        return X


def _line_search(problem: AmodProblem, xu, d) -> float:
    def slope(s):
        return float(_marginal_cost(problem, xu + s * d) @ d)

    if slope(1.0) <= 0:
        return 1.0
    if slope(0.0) >= 0:
        return 0.0
    return optimize.brentq(slope, 0.0, 1.0, xtol=1e-15, rtol=1e-15)


def _newton_step(problem: AmodProblem, poly: _RoutingPolytope, X, prox: float):
    """Target point of a proximal Newton model minimised over the polytope."""
    g = problem.graph
    xu = X.sum(axis=0)
    mc = _marginal_cost(problem, xu)
    h = _curvature(problem, xu)
    z0 = poly.pack(X)
    quad = np.full(poly.n, prox)
    lin = np.zeros(poly.n)
    # non-road per-OD columns carry their fixed time; road costs live on y
    nonroad = ~g.road[poly.col_arc]
    cost_nr = g.fixed_time[poly.col_arc]
    lin[:poly.n_od_cols] = np.where(nonroad, np.where(cost_nr > 0, cost_nr, ZERO_COST_EPS), 0.0)
    ya = poly.y_arcs
    quad[poly.y_start:] = h[ya] + prox
    lin[poly.y_start:] = mc[ya]
    # model: lin'(z - z0) + 1/2 (z - z0)' Q (z - z0)
    q = lin - quad * z0
    res = solve_standard_qp(sp.diags(quad).tocsc(), q, poly.A, poly.b, tol=1e-10)
    return poly.unpack(res.z, g.n_arcs)


def _fw_gap(problem: AmodProblem, od, xu):
    mc = _marginal_cost(problem, xu)
    Y, _ = all_or_nothing_per_od(problem.graph, mc, od)
    f = _routing_cost(problem, xu)
    return float(mc @ (xu - Y.sum(axis=0))) / f, Y


def solve_exact_routing(problem: AmodProblem, tol: float = 1e-6, max_iter: int | None = None,
                        method: str = "newton") -> AmodSolution:
    """Minimise sum t(x^u + x^p) x^u over per-OD flows.

    Both methods certify with the Frank-Wolfe duality gap: a per-OD shortest
    path under marginal costs gives ``grad'(x - y)``, and iteration stops once
    that gap relative to the objective drops below ``tol``.

    ``frank-wolfe`` steps toward the shortest-path solution.  ``newton``
    (default) steps toward the minimiser of a proximal second-order model
    over the flow polytope, which reaches tight gaps in a handful of
    iterations where Frank-Wolfe needs thousands.  Both use an exact line
    search along the step.
    """
    if method not in ("newton", "frank-wolfe"):
        raise ValueError(f"unknown routing method {method!r}")
    if max_iter is None:
        max_iter = 100 if method == "newton" else 20000
    g = problem.graph
    od = g.od_arrays(problem.od)
    if od.demands.sum() <= 0:
        z = np.zeros(g.n_arcs)
        return AmodSolution(np.zeros((len(problem.od), g.n_arcs)), z, z.copy(),
                            problem.private_flow.copy(), method="exact")
    X, _ = all_or_nothing_per_od(g, _marginal_cost(problem, np.zeros(g.n_arcs)), od)
    xu = X.sum(axis=0)
    if method == "newton":
        poly = _RoutingPolytope(problem)
        road = g.road
        prox = 1e-6 * float(np.median(g.t0[road] / g.m[road])) if road.any() else 1e-9
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        gap, Y = _fw_gap(problem, od, xu)
        if gap < tol:
            break
        if method == "newton":
            Y = _newton_step(problem, poly, X, prox)
        d = Y.sum(axis=0) - xu
        step = _line_search(problem, xu, d)
        if method == "newton" and step <= 0.0:
            # model step failed to descend; take a Frank-Wolfe step instead
            _, Y = _fw_gap(problem, od, xu)
            d = Y.sum(axis=0) - xu
            step = _line_search(problem, xu, d)
        X += step * (Y - X)
        xu = X.sum(axis=0)
    converged = gap < tol
    if not converged:
        log.warning("exact routing stopped at relative gap %.2e", gap)
    sol = AmodSolution(X, xu, np.zeros(g.n_arcs), problem.private_flow.copy(),
                       certificate=max(gap, 0.0), converged=converged, iterations=it,
                       method="exact")
    sol.objective_model = _routing_cost(problem, xu)
    sol.objective_true = evaluate_true_objective(sol, problem)
    return sol


def rebalancing_imbalances(graph: SuperGraph, xu) -> np.ndarray:
    """Net rebalancing outflow each road node needs so (x^u + x^r) balances."""
    road_u = np.where(graph.road, xu, 0.0)
    return np.where(graph.road_nodes, -graph.divergence(road_u), 0.0)


def solve_disjoint(problem: AmodProblem, tol: float = 1e-6,
                   update_cost: bool = False) -> AmodSolution:
    """Exact routing first, then the linear rebalancing problem on its output.

    With ``update_cost`` the rebalancing arc cost uses lambda times the
    congested travel time at the routing solution instead of lambda * t0.
    """
    g = problem.graph
    sol = solve_exact_routing(problem, tol=tol)
    c = problem.rebalancing_cost
    if update_cost:
        c = np.where(g.road, problem.lam * problem.arc_times(sol.xu + problem.private_flow), 0.0)
    if problem.rebalancing:
        imb = rebalancing_imbalances(g, sol.xu)
        costs = np.where(g.road, c, np.inf)
        mcf = min_cost_flow(g, costs, imb)
        sol.xr = mcf.flow
    sol.method = "disjoint"
    sol.objective_true = evaluate_true_objective(sol, problem)
    return sol


MODELS = ("cars", "cars3", "disjoint", "exact")


def solve_amod(problem: AmodProblem, model: str, qp_tol: float = 1e-9,
               routing_tol: float = 1e-6, update_cost: bool = False) -> AmodSolution:
    """Dispatch on model name; ``exact`` never rebalances."""
    if model == "cars":
        return solve_qp(assemble_cars(problem), tol=qp_tol)
    if model == "cars3":
        return solve_qp(assemble_cars3(problem), tol=qp_tol)
    if model == "disjoint":
        return solve_disjoint(problem, tol=routing_tol, update_cost=update_cost)
    if model == "exact":
        return solve_exact_routing(problem, tol=routing_tol)
    raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
