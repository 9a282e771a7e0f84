"""Turning raw speed/capacity observations and network files into solver
inputs.

Units are normalised here and nowhere else. File fields carry their unit in
the name (``t0_hours``, ``length_miles``, ``speed_mph``); everything
downstream is hours and vehicles per hour.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .netcore import (ArcClass, Layer, NetworkError, Node, ODPair, SuperGraph, build_supergraph,
                      shortest_path, Unreachable)

DEFAULT_WALK_MPH = 3.1


class InputError(NetworkError):
    """Input file missing, unreadable or schema-invalid."""


# -- traffic-flow estimation ---------------------------------------------------

def greenshield_flow(v, v0, m):
    """Flow (vph) from speed via the parabolic speed-flow relation.

    Speeds above free flow are clamped to it, which yields zero flow.
    """
    v0 = np.asarray(v0, dtype=float)
    m = np.asarray(m, dtype=float)
    if np.any(v0 <= 0) or np.any(m <= 0):
        raise ValueError("free-flow speed and capacity must be positive")
    v = np.maximum(np.minimum(np.asarray(v, dtype=float), v0), 0.0)
    # 4m/v0*v - 4m/v0^2*v^2, factored so v = v0 gives exactly zero
    r = v / v0
    out = 4 * m * r * (1.0 - r)
    return float(out) if np.ndim(out) == 0 else out


def free_flow_speed(speed_samples) -> float:
    """85th percentile of observed speeds, nearest-rank definition."""
    s = np.sort(np.asarray(list(speed_samples), dtype=float))
    if s.size == 0:
        raise ValueError("no speed samples")
    rank = math.ceil(0.85 * s.size)
    return float(s[rank - 1])


@dataclass(frozen=True)
class SegmentObs:
    segment_id: str
    v: float        # average speed, mph
    v0: float       # free-flow speed, mph
    t: float        # travel time, hours
    m: float        # capacity, vph

    def __post_init__(self):
        if not (self.v0 > 0 and self.m > 0 and self.t > 0):
            raise ValueError(f"segment {self.segment_id}: need v0 > 0, m > 0, t > 0")

    @property
    def t0(self) -> float:
        return min(self.v, self.v0) * self.t / self.v0

    @property
    def flow(self) -> float:
        return greenshield_flow(self.v, self.v0, self.m)


@dataclass(frozen=True)
class LinkAggregate:
    x_hat: float
    t0: float
    m: float


def aggregate_segments(segments) -> LinkAggregate:
    """Flow weighted by travel time, free-flow times summed, capacity weighted
    by free-flow time.  (The two weightings differ; that is deliberate.)"""
    segs = list(segments)
    if not segs:
        raise ValueError("no segments to aggregate")
    t = np.array([s.t for s in segs])
    t0 = np.array([s.t0 for s in segs])
    x = np.array([s.flow for s in segs])
    m = np.array([s.m for s in segs])
    if np.any(t0 <= 0):
        raise ValueError("segment free-flow times must be positive")
    return LinkAggregate(float(x @ t / t.sum()), float(t0.sum()), float(m @ t0 / t0.sum()))


# -- network files -----------------------------------------------------------

_OD_LIST = {"type": "array", "items": {
    "type": "object", "required": ["o", "d", "demand"],
    "properties": {"o": {}, "d": {}, "demand": {"type": "number", "minimum": 0}}}}

NETWORK_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["nodes", "arcs"],
    "properties": {
        "nodes": {"type": "array", "items": {
            "type": "object", "required": ["id"],
            "properties": {"id": {"type": ["string", "integer"]},
                           "layer": {"enum": ["road", "walk"]},
                           "lat": {"type": "number"}, "lon": {"type": "number"},
                           "zone": {"type": "boolean"}}}},
        "arcs": {"type": "array", "items": {
            "type": "object", "required": ["tail", "head"],
            "properties": {"tail": {"type": ["string", "integer"]},
                           "head": {"type": ["string", "integer"]},
                           "class": {"enum": ["road", "walk", "switch"]},
                           "t0_hours": {"type": "number", "exclusiveMinimum": 0},
                           "capacity_vph": {"type": "number", "exclusiveMinimum": 0},
                           "fixed_time_hours": {"type": "number", "minimum": 0},
                           "length_miles": {"type": "number", "minimum": 0},
                           "speed_mph": {"type": "number", "exclusiveMinimum": 0}}}},
        "od": {"type": "object", "properties": {
            "amod": _OD_LIST, "private": _OD_LIST, "total": _OD_LIST}},
        "walk_speed_mph": {"type": "number", "exclusiveMinimum": 0},
    },
}


@dataclass
class Network:
    graph: SuperGraph
    amod: list[ODPair] = field(default_factory=list)
    private: list[ODPair] = field(default_factory=list)
    total: list[ODPair] = field(default_factory=list)
    zones: list = field(default_factory=list)

    def demand(self, gamma: float | None = None):
        """(AMoD, private) demand; a ``total`` block is split by gamma."""
        if self.total:
            from .equilibrium import penetration_split
            return penetration_split(self.total, 1.0 if gamma is None else gamma)
        return list(self.amod), list(self.private)


def _ods(items, where):
    out = []
    for k, w in enumerate(items or []):
        try:
            out.append(ODPair(w["o"], w["d"], float(w["demand"])))
        except NetworkError as exc:
            raise InputError(f"{where}[{k}]: {exc}") from None
    return out


def parse_network(doc: dict, walk_speed_mph: float | None = None, source: str = "<network>") -> Network:
    """Validate a network document and build the supergraph."""
    validator = jsonschema.Draft202012Validator(NETWORK_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise InputError(f"{source}: schema violation at {loc}: {e.message}")
    walk_mph = walk_speed_mph or doc.get("walk_speed_mph") or DEFAULT_WALK_MPH

    road_nodes, walk_nodes, zones = [], [], []
    layer_of = {}
    for nd in doc["nodes"]:
        layer = Layer.WALK if nd.get("layer", "road") == "walk" else Layer.ROAD
        node = Node(nd["id"], layer, nd.get("lat"), nd.get("lon"))
        (walk_nodes if layer == Layer.WALK else road_nodes).append(node)
        layer_of[nd["id"]] = layer
        if nd.get("zone"):
            zones.append(nd["id"])

    road_arcs, walk_arcs, switches = [], [], []
    for k, a in enumerate(doc["arcs"]):
        where = f"{source}: arcs[{k}] ({a['tail']!r}->{a['head']!r})"
        for end in ("tail", "head"):
            if a[end] not in layer_of:
                raise InputError(f"{where}: unknown {end} node {a[end]!r}")
        cls = a.get("class")
        if cls is None:
            lt, lh = layer_of[a["tail"]], layer_of[a["head"]]
            cls = "switch" if lt != lh else ("walk" if lt == Layer.WALK else "road")
        if cls == "road":
            if "t0_hours" in a:
                t0 = a["t0_hours"]
            elif "length_miles" in a and "speed_mph" in a:
                t0 = a["length_miles"] / a["speed_mph"]
            else:
                raise InputError(f"{where}: road arc needs t0_hours or length_miles + speed_mph")
            if "capacity_vph" not in a:
                raise InputError(f"{where}: road arc needs capacity_vph")
            road_arcs.append((a["tail"], a["head"], t0, a["capacity_vph"]))
        elif cls == "walk":
            if "length_miles" in a:
                tt = a["length_miles"] / walk_mph
            elif "fixed_time_hours" in a:
                tt = a["fixed_time_hours"]
            else:
                raise InputError(f"{where}: walk arc needs length_miles or fixed_time_hours")
            walk_arcs.append((a["tail"], a["head"], tt))
        else:
            switches.append((a["tail"], a["head"], True, a.get("fixed_time_hours", 0.0)))
    try:
        graph = build_supergraph(road_nodes, road_arcs, walk_nodes, walk_arcs, switches)
    except NetworkError as exc:
        raise InputError(f"{source}: {exc}") from None
    od = doc.get("od", {})
    net = Network(graph, _ods(od.get("amod"), "od.amod"), _ods(od.get("private"), "od.private"),
                  _ods(od.get("total"), "od.total"), zones)
    if net.total and (net.amod or net.private):
        raise InputError(f"{source}: od.total cannot be combined with od.amod/od.private")
    for w in net.amod + net.private + net.total:
        graph.node_index(w.origin)
        graph.node_index(w.destination)
    return net


def load_network(path, walk_speed_mph: float | None = None) -> Network:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_network(doc, walk_speed_mph, str(path))


def network_to_json(graph: SuperGraph, od: dict | None = None, zones=()) -> dict:
    zones = set(zones)
    nodes = []
    for nd in graph.nodes:
        entry = {"id": nd.id, "layer": "road" if nd.layer == Layer.ROAD else "walk"}
        if nd.lat is not None:
            entry["lat"] = nd.lat
        if nd.lon is not None:
            entry["lon"] = nd.lon
        if nd.id in zones:
            entry["zone"] = True
        nodes.append(entry)
    arcs = []
    for a in graph.arcs:
        if a.cls == ArcClass.ROAD:
            arcs.append({"tail": a.tail, "head": a.head, "class": "road",
                         "t0_hours": a.t0, "capacity_vph": a.m})
        else:
            arcs.append({"tail": a.tail, "head": a.head,
                         "class": "walk" if a.cls == ArcClass.WALK else "switch",
                         "fixed_time_hours": a.fixed_time})
    doc = {"nodes": nodes, "arcs": arcs}
    if od:
        doc["od"] = {k: [{"o": w.origin, "d": w.destination, "demand": w.demand} for w in v]
                     for k, v in od.items() if v}
    return doc


# -- raw CSV ingestion -------------------------------------------------------

def _read_csv(path, required):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise InputError(f"{path}: missing columns {missing}")
            return list(enumerate(reader, start=2))
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None


def read_segments(segments_csv, speeds_csv=None) -> dict:
    """Segment observations grouped by link id.

    With a speeds file, each segment's average speed is the sample mean and its
    free-flow speed the 85th percentile of its samples; the segment length
    implied by the CSV row (time * speed) is kept, so its travel time follows
    the averaged speed.
    """
    rows = _read_csv(segments_csv, ["id", "link_id", "speed_mph", "freeflow_mph",
                                    "time_hours", "capacity_vph"])
    samples = defaultdict(list)
    if speeds_csv is not None:
        for line, r in _read_csv(speeds_csv, ["segment_id", "timestamp", "speed_mph"]):
            try:
                samples[r["segment_id"]].append(float(r["speed_mph"]))
            except ValueError:
                raise InputError(f"{speeds_csv}:{line}: bad speed_mph {r['speed_mph']!r}") from None
    links = defaultdict(list)
    for line, r in rows:
        try:
            v = float(r["speed_mph"])
            v0 = float(r["freeflow_mph"])
            t = float(r["time_hours"])
            m = float(r["capacity_vph"])
            if samples.get(r["id"]):
                length = t * v
                v = float(np.mean(samples[r["id"]]))
                v0 = free_flow_speed(samples[r["id"]])
                t = length / v
            links[r["link_id"]].append(SegmentObs(r["id"], v, v0, t, m))
        except (ValueError, ZeroDivisionError) as exc:
            raise InputError(f"{segments_csv}:{line}: {exc}") from None
    return links


def read_link_endpoints(links_csv) -> dict:
    return {r["link_id"]: (r["tail"], r["head"])
            for _, r in _read_csv(links_csv, ["link_id", "tail", "head"])}


def build_from_segments(links: dict, endpoints: dict | None = None) -> dict:
    """Network document with one road arc per link.

    Endpoints come from ``endpoints`` or, failing that, a ``tail->head`` link id.
    """
    nodes, arcs = [], []
    seen = set()
    for link_id in sorted(links):
        if endpoints and link_id in endpoints:
            tail, head = endpoints[link_id]
        elif "->" in link_id:
            tail, head = (s.strip() for s in link_id.split("->", 1))
        else:
            raise InputError(f"link {link_id!r}: no endpoints (use a links file or 'u->v' ids)")
        agg = aggregate_segments(links[link_id])
        for v in (tail, head):
            if v not in seen:
                seen.add(v)
                nodes.append({"id": v, "layer": "road"})
        arcs.append({"tail": tail, "head": head, "class": "road", "t0_hours": agg.t0,
                     "capacity_vph": agg.m, "flow_estimate_vph": agg.x_hat})
    return {"nodes": nodes, "arcs": arcs}


def condense(graph: SuperGraph, hubs: list, edges: list | None = None, zones=()) -> dict:
    """Sub-network on hub nodes; each edge carries the shortest-path free-flow
    time on the full road network and the bottleneck capacity of that path.

    Without explicit ``edges`` every ordered hub pair whose shortest path
    passes through no other hub becomes an edge.
    """
    cost = np.where(graph.road, graph.t0, np.inf)
    hubset = set(hubs)
    for h in hubs:
        graph.node_index(h)
    pairs = edges if edges is not None else [(u, v) for u in hubs for v in hubs if u != v]
    arcs = []
    for u, v in pairs:
        try:
            path, t = shortest_path(graph, cost, u, v)
        except Unreachable:
            if edges is not None:
                raise
            continue
        interior = graph.path_nodes(path)[1:-1]
        if edges is None and any(n in hubset for n in interior):
            continue
        arcs.append({"tail": u, "head": v, "class": "road", "t0_hours": t,
                     "capacity_vph": float(min(graph.m[a] for a in path))})
    nodes = [{"id": h, "layer": "road"} for h in hubs]
    for nd in nodes:
        if nd["id"] in set(zones):
            nd["zone"] = True
    return {"nodes": nodes, "arcs": arcs}


def synthetic_demand(graph: SuperGraph, total: float, kind: str = "uniform", seed: int = 0,
                     zones=None) -> list[ODPair]:
    """Seeded OD matrix over road zones (all road nodes by default).

    ``uniform`` spreads ``total`` evenly over ordered pairs; ``gravity``
    draws node masses and weights pairs by mass product over free-flow time.
    """
    rng = np.random.default_rng(seed)
    zs = list(zones) if zones else [nd.id for nd in graph.nodes if nd.layer == Layer.ROAD]
    pairs = [(o, d) for o in zs for d in zs if o != d]
    if kind == "uniform":
        w = np.ones(len(pairs))
    elif kind == "gravity":
        mass = dict(zip(zs, rng.uniform(0.5, 1.5, len(zs))))
        cost = np.where(graph.road, graph.t0, np.inf)
        w = np.empty(len(pairs))
        for k, (o, d) in enumerate(pairs):
            try:
                _, t = shortest_path(graph, cost, o, d)
            except Unreachable:
                w[k] = 0.0
                continue
            w[k] = mass[o] * mass[d] / max(t, 1e-9)
    else:
        raise ValueError(f"unknown demand kind {kind!r}")
    w = w / w.sum()
    return [ODPair(o, d, float(total * x)) for (o, d), x in zip(pairs, w) if x > 0]
