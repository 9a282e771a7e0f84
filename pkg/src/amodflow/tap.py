"""Selfish private-vehicle assignment with a fixed exogenous flow, solved by
the method of successive averages (MSA)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .latency import BprParams, beckmann_term, bpr_time
from .netcore import Layer, NetworkError, ODPair, OdArrays, SuperGraph, all_or_nothing

log = logging.getLogger(__name__)


@dataclass
class TapProblem:
    graph: SuperGraph
    od: list[ODPair]
    exogenous: np.ndarray | None = None
    alpha: float = 0.15
    power: float = 4.0

    def __post_init__(self):
        g = self.graph
        xe = np.zeros(g.n_arcs) if self.exogenous is None else np.asarray(self.exogenous, float)
        if xe.shape != (g.n_arcs,) or np.any(xe < 0):
            raise NetworkError("exogenous flow must be a nonnegative per-arc vector")
        self.exogenous = np.where(g.road, xe, 0.0)
        for w in self.od:
            for v in (w.origin, w.destination):
                if g.nodes[g.node_index(v)].layer != Layer.ROAD:
                    raise NetworkError(f"private OD endpoint {v!r} is not a road node")

    @property
    def bpr(self) -> BprParams:
        g = self.graph
        return BprParams(np.where(g.road, g.t0, 1.0), np.where(g.road, g.m, 1.0),
                         self.alpha, self.power)

    def times(self, xp) -> np.ndarray:
        g = self.graph
        return np.where(g.road, bpr_time(self.bpr, self.exogenous + xp), np.inf)

    def od_arrays(self) -> OdArrays:
        return self.graph.od_arrays(self.od)


@dataclass
class TapSolution:
    flow: np.ndarray
    beckmann_value: float
    relative_gap: float
    iterations: int
    converged: bool


def beckmann(problem: TapProblem, xp) -> float:
    g = problem.graph
    r = g.road
    bpr = BprParams(g.t0[r], g.m[r], problem.alpha, problem.power)
    lo = problem.exogenous[r]
    return float(np.sum(beckmann_term(bpr, lo, lo + np.asarray(xp)[r])))


def relative_gap(problem: TapProblem, xp, od: OdArrays | None = None) -> float:
    """(total cost - shortest-path lower bound) / total cost at t(x^e + x^p)."""
    od = problem.od_arrays() if od is None else od
    if od.demands.sum() <= 0:
        return 0.0
    t = problem.times(xp)
    g = problem.graph
    total = float(np.where(g.road, t, 0.0) @ xp)
    if not total > 0:
        raise NetworkError("zero total travel cost with positive demand")
    _, sp = all_or_nothing(g, t, od, arc_filter=g.road, return_costs=True)
    bound = float(od.unsort(od.demands) @ sp)
    return (total - bound) / total


def solve_tap(problem: TapProblem, tol: float = 1e-4, max_iter: int = 2000) -> TapSolution:
    """MSA with step 1/k; returns the last iterate, flagged if tol was not met."""
    g = problem.graph
    od = problem.od_arrays()
    if od.demands.sum() <= 0:
        z = np.zeros(g.n_arcs)
        return TapSolution(z, 0.0, 0.0, 0, True)
    xp = all_or_nothing(g, problem.times(np.zeros(g.n_arcs)), od, arc_filter=g.road)
    gap = np.inf
    k = 1
    for k in range(1, max_iter + 1):
        t = problem.times(xp)
        y, sp = all_or_nothing(g, t, od, arc_filter=g.road, return_costs=True)
        total = float(np.where(g.road, t, 0.0) @ xp)
        gap = (total - float(od.unsort(od.demands) @ sp)) / total
        if gap < tol:
            break
        step = 1.0 / (k + 1)
        xp = xp + step * (y - xp)
    converged = gap < tol
    if not converged:
        log.warning("MSA stopped at relative gap %.2e after %d iterations", gap, k)
    return TapSolution(xp, beckmann(problem, xp), max(gap, 0.0), k, converged)
