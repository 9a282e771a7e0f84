"""Fixed-point iteration between the system-optimal AMoD fleet and selfish
private traffic, plus the per-class metrics reported for each scenario."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .latency import DEFAULT_FIT_RANGE, BprParams, PwaParams, bpr_time, fit_pwa
from .netcore import ODPair, SuperGraph
from .sysopt import MODELS, AmodProblem, AmodSolution, evaluate_true_objective, solve_amod
from .tap import TapProblem, TapSolution, solve_tap

log = logging.getLogger(__name__)


@dataclass
class ScenarioConfig:
    demand: list[ODPair]
    gamma: float = 1.0
    model: str = "cars3"
    lam: float = 0.1
    rebalancing: bool = True
    update_cost: bool = False
    tap_tol: float = 1e-4
    tap_max_iter: int = 2000
    qp_tol: float = 1e-9
    routing_tol: float = 1e-6
    eq_tol: float = 1e-3
    max_outer: int = 20
    walk_speed_mph: float | None = None     # applied when the network is loaded
    alpha: float = 0.15
    power: float = 4.0
    fit_range: float = DEFAULT_FIT_RANGE
    pwa: PwaParams | None = None            # explicit override of the fitted surrogate

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")

    def surrogate(self) -> PwaParams | None:
        if self.pwa is not None:
            return self.pwa
        if self.model in ("cars", "cars3"):
            n = 2 if self.model == "cars" else 3
            return fit_pwa(BprParams(1.0, 1.0, self.alpha, self.power), n, self.fit_range)
        return None


def penetration_split(demand: list[ODPair], gamma: float):
    """AMoD gets gamma * d_w, private vehicles (1 - gamma) * d_w, per OD."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    gu = [ODPair(w.origin, w.destination, gamma * w.demand) for w in demand]
    gp = [ODPair(w.origin, w.destination, (1.0 - gamma) * w.demand) for w in demand]
    return gu, gp


def class_metrics(graph: SuperGraph, xu, xr, xp, amod_demand: float, private_demand: float,
                  alpha: float = 0.15, power: float = 4.0) -> dict:
    """Average travel time per class and flow-hours per mode at BPR times.

    Averages for a class with no demand are None rather than 0.
    """
    road = graph.road
    bpr = BprParams(np.where(road, graph.t0, 1.0), np.where(road, graph.m, 1.0), alpha, power)
    x = np.where(road, xu + xr + xp, 0.0)
    t = np.where(road, bpr_time(bpr, x), graph.fixed_time)
    amod = float(t @ xu)
    private = float(t[road] @ xp[road])
    total_demand = amod_demand + private_demand
    return {
        "avg_time_amod": amod / amod_demand if amod_demand > 0 else None,
        "avg_time_private": private / private_demand if private_demand > 0 else None,
        "avg_time_total": (amod + private) / total_demand if total_demand > 0 else None,
        "flow_by_mode": {
            "amod_road": float(t[road] @ xu[road]),
            "rebalancing": float(t[road] @ xr[road]),
            "private": private,
            "walk": float(t[~road] @ xu[~road]),
        },
    }


@dataclass
class TracePoint:
    iteration: int
    xu: np.ndarray
    xr: np.ndarray
    xp: np.ndarray
    cost: float              # AMoD objective (with regulariser) + private travel time
    cost_no_reg: float       # same without the rebalancing regulariser
    metrics: dict


@dataclass
class EquilibriumTrace:
    points: list[TracePoint] = field(default_factory=list)
    converged: bool = False
    amod: AmodSolution | None = None
    tap: TapSolution | None = None
    amod_demand: list[ODPair] = field(default_factory=list)
    private_demand: list[ODPair] = field(default_factory=list)

    @property
    def final(self) -> TracePoint:
        return self.points[-1]


def _record(trace: EquilibriumTrace, graph, problem: AmodProblem, sol: AmodSolution | None,
            xp, cfg: ScenarioConfig, du: float, dp: float) -> float:
    n = graph.n_arcs
    xu = sol.xu if sol is not None else np.zeros(n)
    xr = sol.xr if sol is not None else np.zeros(n)
    total = xu + xr + xp
    t = problem.arc_times(total)
    reg = float(problem.rebalancing_cost @ xr)
    user = float(t @ xu)
    private = float(t[graph.road] @ xp[graph.road])
    cost = user + reg + private
    trace.points.append(TracePoint(len(trace.points) + 1, xu.copy(), xr.copy(), xp.copy(),
                                   cost, user + private,
                                   class_metrics(graph, xu, xr, xp, du, dp, cfg.alpha, cfg.power)))
    return cost


def solve_mixed(graph: SuperGraph, config: ScenarioConfig) -> EquilibriumTrace:
    """Alternate private assignment and AMoD optimisation until the combined
    cost changes by less than ``eq_tol`` (relative) between outer iterations.

    Pure best response, no damping; non-convergence is flagged on the trace.
    """
    cfg = config
    gu, gp = penetration_split(cfg.demand, cfg.gamma)
    gu = [w for w in gu if w.demand > 0]
    gp = [w for w in gp if w.demand > 0]
    du = float(sum(w.demand for w in gu))
    dp = float(sum(w.demand for w in gp))
    trace = EquilibriumTrace(amod_demand=gu, private_demand=gp)
    problem = AmodProblem(graph, gu, None, cfg.surrogate(), cfg.lam, cfg.rebalancing,
                          alpha=cfg.alpha, power=cfg.power)

    def tap(exo):
        return solve_tap(TapProblem(graph, gp, exo, cfg.alpha, cfg.power),
                         tol=cfg.tap_tol, max_iter=cfg.tap_max_iter)

    def amod(xp, prev: AmodSolution | None):
        p = problem.with_private_flow(xp)
        if cfg.update_cost and prev is not None:
            p.rebalancing_cost = np.where(graph.road,
                                          cfg.lam * p.arc_times(prev.total_flow), 0.0)
        return solve_amod(p, cfg.model, qp_tol=cfg.qp_tol, routing_tol=cfg.routing_tol,
                          update_cost=cfg.update_cost)

    zero = np.zeros(graph.n_arcs)
    trace.tap = tap(zero)
    xp = trace.tap.flow
    if not gu:
        _record(trace, graph, problem, None, xp, cfg, du, dp)
        trace.converged = trace.tap.converged
        return trace
    if not gp:
        trace.amod = amod(zero, None)
        _record(trace, graph, problem, trace.amod, zero, cfg, du, dp)
        trace.converged = trace.amod.converged
        return trace

    prev_cost = None
    sol = None
    for k in range(1, cfg.max_outer + 1):
        sol = amod(xp, sol)
        trace.amod = sol
        trace.tap = tap(sol.xu + sol.xr)
        xp = trace.tap.flow
        cost = _record(trace, graph, problem, sol, xp, cfg, du, dp)
        log.info("outer iteration %d: total cost %.6g", k, cost)
        if prev_cost is not None and abs(cost - prev_cost) <= cfg.eq_tol * abs(prev_cost):
            trace.converged = True
            break
        prev_cost = cost
    if not trace.converged:
        log.warning("equilibrium loop hit %d outer iterations without converging", cfg.max_outer)
    return trace


def amod_objective(trace: EquilibriumTrace, graph: SuperGraph, config: ScenarioConfig) -> float:
    """True AMoD objective of the final point (BPR at the final total flow)."""
    if trace.amod is None:
        return 0.0
    problem = AmodProblem(graph, trace.amod_demand, trace.final.xp, None, config.lam,
                          config.rebalancing, alpha=config.alpha, power=config.power)
    return evaluate_true_objective(trace.amod, problem)
