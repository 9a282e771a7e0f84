"""Regenerate the bundled example networks in src/amodflow/data.

Everything is seeded; rerunning produces identical files.
"""

import json
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "amodflow" / "data"
ROAD_MPH = 30.0
WALK_MPH = 3.1


def dist(a, b):
    # planar coordinates in miles
    return math.hypot(a[0] - b[0], a[1] - b[1])


def grid4():
    """Four intersections on a square with two diagonals, asymmetric demand."""
    pos = {"A": (0.0, 0.0), "B": (1.0, 0.0), "C": (1.0, 1.0), "D": (0.0, 1.0)}
    sides = [("A", "B", 1000), ("B", "C", 800), ("C", "D", 1000), ("D", "A", 800)]
    diags = [("A", "C", 600), ("B", "D", 600)]
    arcs = []
    for u, v, cap in sides:
        for a, b in ((u, v), (v, u)):
            arcs.append({"tail": a, "head": b, "class": "road", "t0_hours": 0.1, "capacity_vph": cap})
    for u, v, cap in diags:
        for a, b in ((u, v), (v, u)):
            arcs.append({"tail": a, "head": b, "class": "road", "t0_hours": 0.15, "capacity_vph": cap})
    nodes = [{"id": k, "layer": "road", "zone": True} for k in pos]
    total = [{"o": "A", "d": "C", "demand": 1200.0}, {"o": "B", "d": "D", "demand": 640.0},
             {"o": "C", "d": "A", "demand": 320.0}, {"o": "D", "d": "B", "demand": 240.0}]
    return {"nodes": nodes, "arcs": arcs, "od": {"total": total}}, pos


def with_walk(doc, pos, walk_pairs):
    doc = json.loads(json.dumps(doc))
    for k in pos:
        doc["nodes"].append({"id": f"{k}w", "layer": "walk"})
        doc["arcs"].append({"tail": k, "head": f"{k}w", "class": "switch", "fixed_time_hours": 0.0})
        doc["arcs"].append({"tail": f"{k}w", "head": k, "class": "switch", "fixed_time_hours": 0.0})
    for u, v in walk_pairs:
        length = round(dist(pos[u], pos[v]), 6)
        for a, b in ((u, v), (v, u)):
            doc["arcs"].append({"tail": f"{a}w", "head": f"{b}w", "class": "walk",
                                "length_miles": length})
    return doc


def synthetic(n, seed):
    """Random planar road network: k-nearest-neighbour arcs in both directions."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 3.0, size=(n, 2))
    ids = [f"n{i}" for i in range(n)]
    edges = set()
    for i in range(n):
        d = np.hypot(*(pts - pts[i]).T)
        for j in np.argsort(d)[1:4]:
            edges.add((min(i, int(j)), max(i, int(j))))
    # ring guarantees strong connectivity
    for i in range(n):
        j = (i + 1) % n
        edges.add((min(i, j), max(i, j)))
    arcs = []
    for i, j in sorted(edges):
        cap = float(rng.choice([600.0, 800.0, 1000.0, 1200.0]))
        t0 = round(max(dist(pts[i], pts[j]), 0.2) / ROAD_MPH, 6)
        for a, b in ((i, j), (j, i)):
            arcs.append({"tail": ids[a], "head": ids[b], "class": "road", "t0_hours": t0,
                         "capacity_vph": cap})
    nodes = [{"id": ids[i], "layer": "road", "zone": True} for i in range(n)]
    od = []
    for _ in range(max(3, n)):
        o, d = rng.choice(n, size=2, replace=False)
        od.append((ids[o], ids[d], float(rng.integers(2, 9)) * 50.0))
    merged = {}
    for o, d, q in od:
        merged[(o, d)] = merged.get((o, d), 0.0) + q
    amod = [{"o": o, "d": d, "demand": q} for (o, d), q in sorted(merged.items())]
    return {"nodes": nodes, "arcs": arcs, "od": {"amod": amod}}


def write(name, doc):
    (OUT / name).write_text(json.dumps(doc, indent=1) + "\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    base, pos = grid4()
    write("grid4.json", base)
    write("grid4_walk.json", with_walk(base, pos, [("A", "B"), ("B", "C"), ("C", "D"), ("D", "A")]))
    for k, (n, seed) in enumerate([(4, 11), (5, 12), (6, 13), (8, 14), (10, 15)]):
        write(f"synthetic_{k + 1}.json", synthetic(n, seed))


if __name__ == "__main__":
    main()
