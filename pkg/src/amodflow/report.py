"""Machine-readable reports: schema, hashing and deterministic serialisation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math

import jsonschema
import numpy as np

SCHEMA_VERSION = "1.0"

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}

_METRICS = {
    "type": "object",
    "required": ["avg_time_amod", "avg_time_private", "avg_time_total", "flow_by_mode"],
    "properties": {
        "avg_time_amod": _NUM_OR_NULL,
        "avg_time_private": _NUM_OR_NULL,
        "avg_time_total": _NUM_OR_NULL,
        "flow_by_mode": {"type": "object", "required": ["amod_road", "rebalancing", "private", "walk"],
                         "additionalProperties": _NUM},
    },
}

_FLOWS = {
    "type": "object",
    "required": ["arcs", "xu", "xr", "xp", "od"],
    "properties": {
        "arcs": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
        "xu": {"type": "array", "items": _NUM},
        "xr": {"type": "array", "items": _NUM},
        "xp": {"type": "array", "items": _NUM},
        "od": {"type": "array", "items": {
            "type": "object", "required": ["o", "d", "demand", "flow"],
            "properties": {"demand": _NUM,
                           "flow": {"type": "object", "additionalProperties": _NUM}}}},
    },
}

_RESULT = {
    "type": "object",
    "required": ["model", "objective_model", "objective_true", "objective_per_demand",
                 "certificate", "converged", "iterations", "rebalancing_flow_total", "metrics"],
    "properties": {
        "model": {"enum": ["cars", "cars3", "disjoint", "exact"]},
        "objective_model": _NUM,
        "objective_true": {"type": "number", "minimum": 0},
        "objective_per_demand": _NUM_OR_NULL,
        "certificate": _NUM,
        "converged": {"type": "boolean"},
        "iterations": {"type": "integer"},
        "rebalancing_flow_total": _NUM,
        "metrics": _METRICS,
    },
}

_TRACE_POINT = {
    "type": "object",
    "required": ["iteration", "cost", "cost_no_reg", "avg_time_amod", "avg_time_private",
                 "avg_time_total"],
    "properties": {"iteration": {"type": "integer"}, "cost": _NUM, "cost_no_reg": _NUM,
                   "avg_time_amod": _NUM_OR_NULL, "avg_time_private": _NUM_OR_NULL,
                   "avg_time_total": _NUM_OR_NULL},
}

_SCENARIO = {
    "type": "object",
    "required": ["gamma", "converged", "outer_iterations", "trace", "metrics"],
    "properties": {
        "gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "converged": {"type": "boolean"},
        "outer_iterations": {"type": "integer", "minimum": 1},
        "trace": {"type": "array", "items": _TRACE_POINT},
        "metrics": _METRICS,
        "amod_objective_true": _NUM,
        "tap_relative_gap": _NUM,
        "flows": _FLOWS,
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "amodflow report",
    "type": "object",
    "required": ["schema_version", "command", "config", "config_hash", "network"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": ["solve", "equilibrium", "recover"]},
        "config": {"type": "object"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "network": {"type": "object", "required": ["sha256", "n_nodes", "n_arcs"],
                    "properties": {"sha256": {"type": "string"},
                                   "n_nodes": {"type": "integer"},
                                   "n_arcs": {"type": "integer"}}},
        "results": {"type": "array", "items": _RESULT},
        "comparison": {"type": "object", "required": ["exact_objective_true", "deviation_percent"],
                       "properties": {"exact_objective_true": _NUM, "deviation_percent": _NUM,
                                      "exact_converged": {"type": "boolean"}}},
        "flows": _FLOWS,
        "scenarios": {"type": "array", "items": _SCENARIO},
        "od_routes": {"type": "array"},
        "rebalancing": {"type": "object"},
        "timings": {"type": "object", "additionalProperties": _NUM},
    },
    "allOf": [
        {"if": {"properties": {"command": {"const": "solve"}}},
         "then": {"required": ["results", "flows"]}},
        {"if": {"properties": {"command": {"const": "equilibrium"}}},
         "then": {"required": ["scenarios"]}},
        {"if": {"properties": {"command": {"const": "recover"}}},
         "then": {"required": ["od_routes", "rebalancing"]}},
    ],
}


def clean(obj):
    """Plain JSON types only; numpy scalars and arrays converted, NaN rejected."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("non-finite number in report")
        return v + 0.0          # folds -0.0
    return obj


def dumps(obj) -> str:
    return json.dumps(clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(clean(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def validate(report: dict) -> None:
    jsonschema.Draft202012Validator(REPORT_SCHEMA).validate(clean(report))


def flows_block(graph, od_pairs, od_flows, xu, xr, xp) -> dict:
    """Arc flows plus sparse per-OD flows, keyed by arc index."""
    arcs = [[a.tail, a.head, a.cls.name.lower()] for a in graph.arcs]
    od = []
    for w, row in zip(od_pairs, od_flows):
        nz = np.flatnonzero(np.abs(row) > 0)
        od.append({"o": w.origin, "d": w.destination, "demand": w.demand,
                   "flow": {str(int(a)): float(row[a]) for a in nz}})
    return {"arcs": arcs, "xu": xu, "xr": xr, "xp": xp, "od": od}


def csv_table(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating))
                                          else v) for v in r])
    return buf.getvalue()
