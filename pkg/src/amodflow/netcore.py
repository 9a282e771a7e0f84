"""Supergraph data model and the graph primitives shared by every solver."""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class NetworkError(ValueError):
    """Malformed network or request against it."""


class Unreachable(NetworkError):
    pass


class InfeasibleFlow(NetworkError):
    pass


class Layer(enum.IntEnum):
    ROAD = 0
    WALK = 1


class ArcClass(enum.IntEnum):
    ROAD = 0
    WALK = 1
    SWITCH = 2


@dataclass(frozen=True)
class Node:
    id: Hashable
    layer: Layer = Layer.ROAD
    lat: float | None = None
    lon: float | None = None


@dataclass(frozen=True)
class Arc:
    id: int
    tail: Hashable
    head: Hashable
    cls: ArcClass
    t0: float = 0.0
    m: float = 0.0
    fixed_time: float = 0.0


@dataclass(frozen=True)
class ODPair:
    origin: Hashable
    destination: Hashable
    demand: float

    def __post_init__(self):
        if self.origin == self.destination:
            raise NetworkError(f"OD pair with origin == destination ({self.origin!r})")
        if not self.demand >= 0:
            raise NetworkError(f"negative demand on OD {self.origin!r}->{self.destination!r}")


@dataclass(frozen=True)
class OdArrays:
    """OD pairs as index arrays, sorted by origin for tree reuse.

    ``order[k]`` is the position in the caller's list of sorted entry ``k``.
    """

    origins: np.ndarray
    dests: np.ndarray
    demands: np.ndarray
    order: np.ndarray

    def unsort(self, rows: np.ndarray) -> np.ndarray:
        out = np.empty_like(rows)
        out[self.order] = rows
        return out


class SuperGraph:
    """Road and walking layers joined by switching arcs.

    Immutable after construction.  Node ids are opaque; internally nodes are
    addressed by their position in ``nodes`` and arcs by ``Arc.id`` (which
    equals their position in ``arcs``).  Dense per-arc arrays (``t0``, ``m``,
    ``fixed_time``, ``cls``) are what the solvers actually touch.
    """

    def __init__(self, nodes: Sequence[Node], arcs: Sequence[Arc]):
        self.nodes = tuple(nodes)
        self.arcs = tuple(arcs)
        self.index: dict[Hashable, int] = {}
        for i, nd in enumerate(self.nodes):
            if nd.id in self.index:
                raise NetworkError(f"duplicate node id {nd.id!r}")
            self.index[nd.id] = i
        layer = np.array([int(nd.layer) for nd in self.nodes], dtype=np.int64)
        n_arcs = len(self.arcs)
        tail = np.empty(n_arcs, dtype=np.int64)
        head = np.empty(n_arcs, dtype=np.int64)
        for k, a in enumerate(self.arcs):
            if a.id != k:
                raise NetworkError(f"arc ids must be 0..n-1 in order, got {a.id} at {k}")
            try:
                tail[k] = self.index[a.tail]
                head[k] = self.index[a.head]
            except KeyError as exc:
                raise NetworkError(f"arc {k} references unknown node {exc.args[0]!r}") from None
            _check_arc(a, layer[tail[k]], layer[head[k]])
        self.layer = layer
        self.tail = tail
        self.head = head
        self.cls = np.array([int(a.cls) for a in self.arcs], dtype=np.int64)
        self.t0 = np.array([a.t0 for a in self.arcs], dtype=float)
        self.m = np.array([a.m for a in self.arcs], dtype=float)
        self.fixed_time = np.array([a.fixed_time for a in self.arcs], dtype=float)
        self.road = self.cls == ArcClass.ROAD
        self.road_nodes = layer == Layer.ROAD
        order = np.argsort(tail, kind="stable")
        self.adj_arc = order.astype(np.int64)
        self.indptr = np.zeros(len(self.nodes) + 1, dtype=np.int64)
        np.cumsum(np.bincount(tail, minlength=len(self.nodes)), out=self.indptr[1:])
        for arr in (self.layer, self.tail, self.head, self.cls, self.t0, self.m,
                    self.fixed_time, self.road, self.road_nodes, self.adj_arc, self.indptr):
            arr.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def node_index(self, node_id: Hashable) -> int:
        try:
            return self.index[node_id]
        except KeyError:
            raise NetworkError(f"unknown node {node_id!r}") from None

    def out_arcs(self, node_id: Hashable) -> np.ndarray:
        i = self.node_index(node_id)
        return self.adj_arc[self.indptr[i]:self.indptr[i + 1]]

    def divergence(self, flow: np.ndarray) -> np.ndarray:
        """Outflow minus inflow at every node."""
        n = self.n_nodes
        return (np.bincount(self.tail, weights=flow, minlength=n)
                - np.bincount(self.head, weights=flow, minlength=n))

    def road_view(self) -> "SuperGraph":
        """The road layer alone; arc ids are renumbered, ``parent_arc`` maps back."""
        nodes = [nd for nd in self.nodes if nd.layer == Layer.ROAD]
        keep = np.flatnonzero(self.road)
        arcs = [Arc(k, self.arcs[a].tail, self.arcs[a].head, ArcClass.ROAD,
                    self.arcs[a].t0, self.arcs[a].m) for k, a in enumerate(keep)]
        view = SuperGraph(nodes, arcs)
        view.parent_arc = keep
        return view

    def od_arrays(self, od_pairs: Iterable[ODPair]) -> OdArrays:
        ods = list(od_pairs)
        o = np.array([self.node_index(w.origin) for w in ods], dtype=np.int64)
        d = np.array([self.node_index(w.destination) for w in ods], dtype=np.int64)
        q = np.array([float(w.demand) for w in ods], dtype=float)
        order = np.argsort(o, kind="stable")
        return OdArrays(o[order], d[order], q[order], order)

    def path_nodes(self, arc_ids: Sequence[int]) -> list:
        if not len(arc_ids):
            return []
        out = [self.arcs[arc_ids[0]].tail]
        out.extend(self.arcs[a].head for a in arc_ids)
        return out


def _check_arc(a: Arc, tail_layer: int, head_layer: int) -> None:
    if a.cls == ArcClass.ROAD:
        if tail_layer != Layer.ROAD or head_layer != Layer.ROAD:
            raise NetworkError(f"road arc {a.id} must join road-layer nodes")
        if not a.m > 0:
            raise NetworkError(f"road arc {a.id} has nonpositive capacity {a.m}")
        if not a.t0 > 0:
            raise NetworkError(f"road arc {a.id} has nonpositive free-flow time {a.t0}")
    elif a.cls == ArcClass.WALK:
        if tail_layer != Layer.WALK or head_layer != Layer.WALK:
            raise NetworkError(f"walk arc {a.id} must join walk-layer nodes")
        if not a.fixed_time >= 0:
            raise NetworkError(f"walk arc {a.id} has negative travel time")
    else:
        if tail_layer == head_layer:
            raise NetworkError(f"switch arc {a.id} joins two nodes of the same layer")
        if not a.fixed_time >= 0:
            raise NetworkError(f"switch arc {a.id} has negative travel time")


def _as_node(x, layer: Layer) -> Node:
    if isinstance(x, Node):
        if x.layer != layer:
            raise NetworkError(f"node {x.id!r} declared in the wrong layer")
        return x
    return Node(x, layer)


def build_supergraph(road_nodes, road_arcs, walk_nodes=(), walk_arcs=(), switch_pairs=(),
                     switch_time: float = 0.0) -> SuperGraph:
    """Assemble and validate a supergraph.

    ``road_arcs`` are ``(tail, head, t0_hours, capacity_vph)``; ``walk_arcs``
    are ``(tail, head, time_hours)``.  Each switch pair ``(u, v)`` yields arcs
    u->v and v->u; a third element ``True`` makes it one-way, and an optional
    fourth overrides ``switch_time`` for that pair.
    """
    nodes = [_as_node(x, Layer.ROAD) for x in road_nodes]
    nodes += [_as_node(x, Layer.WALK) for x in walk_nodes]
    layer_of = {}
    for nd in nodes:
        if nd.id in layer_of:
            raise NetworkError(f"duplicate node id {nd.id!r}")
        layer_of[nd.id] = nd.layer
    arcs: list[Arc] = []
    for tail, head, t0, m in road_arcs:
        arcs.append(Arc(len(arcs), tail, head, ArcClass.ROAD, t0=float(t0), m=float(m)))
    for tail, head, tt in walk_arcs:
        arcs.append(Arc(len(arcs), tail, head, ArcClass.WALK, fixed_time=float(tt)))
    for pair in switch_pairs:
        u, v = pair[0], pair[1]
        one_way = bool(pair[2]) if len(pair) > 2 else False
        tt = float(pair[3]) if len(pair) > 3 else float(switch_time)
        if u not in layer_of or v not in layer_of:
            raise NetworkError(f"switch pair ({u!r}, {v!r}) references an unknown node")
        if layer_of[u] == layer_of[v]:
            raise NetworkError(f"switch pair ({u!r}, {v!r}) joins two nodes of the same layer")
        arcs.append(Arc(len(arcs), u, v, ArcClass.SWITCH, fixed_time=tt))
        if not one_way:
            arcs.append(Arc(len(arcs), v, u, ArcClass.SWITCH, fixed_time=tt))
    return SuperGraph(nodes, arcs)


def masked_costs(graph: SuperGraph, arc_costs, arc_filter=None) -> np.ndarray:
    """Cost array with ``inf`` on arcs rejected by ``arc_filter``; checks sign."""
    c = np.array(arc_costs, dtype=float, copy=True)
    if c.shape != (graph.n_arcs,):
        raise NetworkError(f"expected {graph.n_arcs} arc costs, got shape {c.shape}")
    if arc_filter is not None:
        c[~np.asarray(arc_filter, dtype=bool)] = np.inf
    if np.any(c < 0) or np.any(np.isnan(c)):
        raise NetworkError("negative or NaN cost on an admissible arc")
    return c


def shortest_path(graph: SuperGraph, arc_costs, origin, destination, arc_filter=None):
    """Minimum-cost path as ``(arc_ids, cost)``; raises Unreachable."""
    c = masked_costs(graph, arc_costs, arc_filter)
    o = graph.node_index(origin)
    t = graph.node_index(destination)
    if o == t:
        return [], 0.0
    dist, pred = kernels.dijkstra(graph.indptr, graph.adj_arc, graph.head, c, o)
    if not np.isfinite(dist[t]):
        raise Unreachable(f"{destination!r} is unreachable from {origin!r}")
    path = []
    v = t
    while v != o:
        a = int(pred[v])
        path.append(a)
        v = graph.tail[a]
    path.reverse()
    return path, float(dist[t])


def _raise_unreachable(graph: SuperGraph, od: OdArrays, bad: int):
    o = graph.nodes[od.origins[bad]].id
    t = graph.nodes[od.dests[bad]].id
    raise Unreachable(f"OD {o!r}->{t!r} has no admissible path")


def all_or_nothing(graph: SuperGraph, arc_costs, od_pairs, arc_filter=None,
                   return_costs: bool = False):
    """Load every OD's demand on its current shortest path and sum."""
    c = masked_costs(graph, arc_costs, arc_filter)
    od = od_pairs if isinstance(od_pairs, OdArrays) else graph.od_arrays(od_pairs)
    flow, sp, bad = kernels.aon_total(graph.indptr, graph.adj_arc, graph.tail, graph.head, c,
                                      od.origins, od.dests, od.demands)
    if bad >= 0:
        _raise_unreachable(graph, od, bad)
    if return_costs:
        return flow, od.unsort(sp)
    return flow


def all_or_nothing_per_od(graph: SuperGraph, arc_costs, od: OdArrays, arc_filter=None):
    """Per-OD loading, rows in the caller's original OD order, plus SP costs."""
    c = masked_costs(graph, arc_costs, arc_filter)
    flows, sp, bad = kernels.aon_per_od(graph.indptr, graph.adj_arc, graph.tail, graph.head, c,
                                        od.origins, od.dests, od.demands)
    if bad >= 0:
        _raise_unreachable(graph, od, bad)
    return od.unsort(flows), od.unsort(sp)


@dataclass
class McfResult:
    flow: np.ndarray
    cost: float
    potential: np.ndarray
    # largest reduced-cost violation over residual arcs; ~0 certifies optimality
    violation: float = field(default=0.0)


def _imbalance_vector(graph: SuperGraph, imbalances) -> np.ndarray:
    if isinstance(imbalances, Mapping):
        b = np.zeros(graph.n_nodes)
        for k, v in imbalances.items():
            b[graph.node_index(k)] += float(v)
        return b
    b = np.asarray(imbalances, dtype=float)
    if b.shape != (graph.n_nodes,):
        raise NetworkError(f"expected {graph.n_nodes} node imbalances, got shape {b.shape}")
    return b.copy()


def min_cost_flow(graph: SuperGraph, arc_costs, node_imbalances, arc_filter=None) -> McfResult:
    """Uncapacitated min-cost flow by successive shortest paths with potentials.

    Positive imbalance is supply (net outflow), negative is demand.  Arcs with
    infinite cost (or rejected by ``arc_filter``) are unavailable.
    """
    c = masked_costs(graph, arc_costs, arc_filter)
    excess = _imbalance_vector(graph, node_imbalances)
    scale = max(1.0, float(np.abs(excess).max(initial=0.0)))
    tol = 1e-12 * scale
    if abs(excess.sum()) > 1e-9 * scale:
        raise NetworkError(f"node imbalances do not sum to zero (sum={excess.sum():.3e})")
    n = graph.n_nodes
    usable = np.isfinite(c)
    flow = np.zeros(graph.n_arcs)
    pi = np.zeros(n)
    # reverse residual adjacency: for node v, arcs entering v
    in_order = np.argsort(graph.head, kind="stable")
    in_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(graph.head, minlength=n), out=in_ptr[1:])
    tail, head = graph.tail, graph.head

    while True:
        sources = np.flatnonzero(excess > tol)
        if sources.size == 0:
            break
        dist = np.full(n, np.inf)
        pred = np.full(n, -1, dtype=np.int64)
        backward = np.zeros(n, dtype=bool)
        done = np.zeros(n, dtype=bool)
        heap = []
        for s in sources:
            dist[s] = 0.0
            heap.append((0.0, int(s)))
        heapq.heapify(heap)
        target = -1
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            if excess[u] < -tol:
                target = u
                break
            for k in range(graph.indptr[u], graph.indptr[u + 1]):
                a = graph.adj_arc[k]
                if not usable[a]:
                    continue
                v = head[a]
                nd = d + max(c[a] + pi[u] - pi[v], 0.0)
                if nd < dist[v]:
                    dist[v], pred[v], backward[v] = nd, a, False
                    heapq.heappush(heap, (nd, int(v)))
            for k in range(in_ptr[u], in_ptr[u + 1]):
                a = in_order[k]
                if flow[a] <= tol:
                    continue
                v = tail[a]
                nd = d + max(-(c[a] + pi[v] - pi[u]), 0.0)
                if nd < dist[v]:
                    dist[v], pred[v], backward[v] = nd, a, True
                    heapq.heappush(heap, (nd, int(v)))
        if target < 0:
            raise InfeasibleFlow("remaining supply cannot reach any demand node")
        dt = dist[target]
        pi += np.minimum(dist, dt)
        # sources keep pred == -1 since nothing beats distance 0
        amount = -excess[target]
        v = target
        while pred[v] != -1:
            a = pred[v]
            if backward[v]:
                amount = min(amount, flow[a])
                v = head[a]
            else:
                v = tail[a]
        amount = min(amount, excess[v])
        src = v
        v = target
        while v != src:
            a = pred[v]
            if backward[v]:
                flow[a] -= amount
                v = head[a]
            else:
                flow[a] += amount
                v = tail[a]
        excess[src] -= amount
        excess[target] += amount
        flow[np.abs(flow) <= tol] = 0.0

    rc = np.where(usable, c + pi[tail] - pi[head], 0.0)
    viol = max(float(np.max(-rc, initial=0.0)),
               float(np.max(np.abs(rc[flow > tol]), initial=0.0)))
    cost = float(np.dot(np.where(usable, c, 0.0), flow))
    return McfResult(flow, cost, pi, viol)
