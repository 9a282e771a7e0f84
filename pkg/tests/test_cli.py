import csv
import json

import numpy as np
import pytest

from amodflow import data_path
from amodflow.cli import main
from amodflow.ingest import load_network, network_to_json
from amodflow.latency import BprParams, fit_pwa, max_relative_error
from amodflow.netcore import ODPair, build_supergraph
from amodflow.report import flows_block, validate
from amodflow.tap import TapProblem, solve_tap

GRID = str(data_path("grid4.json"))
GRID_WALK = str(data_path("grid4_walk.json"))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def report(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    doc = json.loads(out)
    validate(doc)
    return doc


def scaled(tmp_path, src, k, name="scaled.json"):
    doc = json.loads(open(src).read())
    for block in doc["od"].values():
        for w in block:
            w["demand"] *= k
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def write_graph(tmp_path, graph, od, name):
    p = tmp_path / name
    p.write_text(json.dumps(network_to_json(graph, od)))
    return p


# -- errors ------------------------------------------------------------------

def test_missing_network_is_input_error(capsys, tmp_path):
    missing = tmp_path / "absent.json"
    code, out, err = run(capsys, "solve", missing)
    assert code == 2
    assert str(missing) in err
    assert json.loads(out)["error"]["type"] == "input"


def test_missing_segments_file(capsys, tmp_path):
    code, _, err = run(capsys, "ingest", "--segments", tmp_path / "s.csv", "--out", tmp_path / "n.json")
    assert code == 2 and "s.csv" in err


@pytest.mark.parametrize("argv", [
    ["--beta", "0.5"],
    ["--theta1", "0.5"],
])
def test_incomplete_surrogate_override(capsys, argv):
    assert run(capsys, "solve", GRID, *argv)[0] == 2


def test_bad_sweep_and_threads(capsys, monkeypatch):
    assert run(capsys, "equilibrium", GRID, "--gamma-sweep", "1:0:0.1")[0] == 2
    assert run(capsys, "equilibrium", GRID, "--gamma-sweep", "a:b")[0] == 2
    monkeypatch.setenv("AMOD_THREADS", "many")
    assert run(capsys, "equilibrium", GRID, "--gamma-sweep", "0:1:0.5")[0] == 2


# -- solve -------------------------------------------------------------------

def test_compare_exact_deviation_small(capsys):
    doc = report(capsys, "solve", GRID, "--model", "cars3", "--no-rebalance", "--compare-exact")
    dev = doc["comparison"]["deviation_percent"]
    assert -1e-6 <= dev < 2.0
    assert doc["results"][0]["model"] == "cars3"
    assert doc["schema_version"] and len(doc["config_hash"]) == 64


def mirrored(tmp_path):
    g = load_network(GRID).graph
    od = [ODPair("A", "C", 300.0), ODPair("C", "A", 300.0),
          ODPair("B", "D", 200.0), ODPair("D", "B", 200.0)]
    return write_graph(tmp_path, g, {"amod": od}, "mirror.json")


def test_disjoint_on_symmetric_demand_needs_no_rebalancing(capsys, tmp_path):
    doc = report(capsys, "solve", mirrored(tmp_path), "--model", "disjoint")
    res = doc["results"][0]
    assert res["rebalancing_flow_total"] < 1e-6 * 1000.0
    assert res["converged"]


def test_exact_matches_cars3_when_uncongested(capsys, tmp_path):
    g = load_network(GRID).graph
    od = [ODPair("A", "C", 10.0), ODPair("B", "D", 5.0)]
    p = write_graph(tmp_path, g, {"amod": od}, "light.json")
    ex = report(capsys, "solve", p, "--model", "exact")["results"][0]
    c3 = report(capsys, "solve", p, "--model", "cars3", "--no-rebalance")["results"][0]
    # loads stay below 1% of capacity; the surrogate is within its relative error there
    bound = max_relative_error(fit_pwa(BprParams(1.0, 1.0)), BprParams(1.0, 1.0), 0.02)
    assert abs(ex["objective_true"] - c3["objective_true"]) <= bound * ex["objective_true"] + 1e-12
    # both ODs take their 0.15 h diagonal
    assert ex["objective_true"] == pytest.approx(15 * 0.15, rel=1e-6)


def test_solve_flows_and_timings(capsys, tmp_path):
    doc = report(capsys, "solve", GRID, "--timings")
    assert set(doc["timings"]) >= {"load", "solve"}
    assert "timings" not in report(capsys, "solve", GRID)
    fl = doc["flows"]
    assert len(fl["xu"]) == len(fl["arcs"]) == 12
    out = tmp_path / "r.json"
    assert run(capsys, "solve", GRID, "--out", out)[0] == 0
    assert json.loads(out.read_text())["command"] == "solve"


def test_solve_deterministic(capsys):
    a = run(capsys, "solve", GRID, "--model", "cars", "--compare-exact")[1]
    b = run(capsys, "solve", GRID, "--model", "cars", "--compare-exact")[1]
    assert a == b


def test_private_flow_file(capsys, tmp_path):
    xp = [50.0] * 12
    pf = tmp_path / "xp.json"
    pf.write_text(json.dumps({"xp": xp}))
    doc = report(capsys, "solve", GRID, "--private-flow", pf)
    assert doc["flows"]["xp"] == xp
    pf.write_text(json.dumps({"xp": [1.0]}))
    assert run(capsys, "solve", GRID, "--private-flow", pf)[0] == 2


# -- equilibrium ----------------------------------------------------------------

def test_gamma_zero_row_equals_tap(capsys):
    doc = report(capsys, "equilibrium", GRID, "--gamma", "0")
    net = load_network(GRID)
    sol = solve_tap(TapProblem(net.graph, net.total), tol=1e-4)
    t = TapProblem(net.graph, net.total).times(sol.flow)
    g = net.graph
    expected = float(t[g.road] @ sol.flow[g.road]) / sum(w.demand for w in net.total)
    row = doc["scenarios"][0]
    assert row["gamma"] == 0.0 and row["converged"]
    assert row["metrics"]["avg_time_private"] == pytest.approx(expected, rel=1e-9)


def test_sweep_private_time_non_increasing(capsys, tmp_path):
    prefix = tmp_path / "sweep"
    doc = report(capsys, "equilibrium", GRID, "--no-rebalance", "--gamma-sweep", "0:1:0.25",
                 "--csv-prefix", prefix)
    rows = doc["scenarios"]
    assert [r["gamma"] for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    priv = [r["metrics"]["avg_time_private"] for r in rows[:-1]]
    assert all(b <= a + 1e-9 for a, b in zip(priv, priv[1:]))
    assert rows[-1]["metrics"]["avg_time_private"] is None
    with open(f"{prefix}_times.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [float(r["gamma"]) for r in table] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert float(table[0]["avg_time_private"]) == rows[0]["metrics"]["avg_time_private"]
    with open(f"{prefix}_modes.csv") as fh:
        assert next(csv.reader(fh)) == ["gamma", "amod_road", "rebalancing", "private", "walk"]


def test_sweep_parallel_equals_serial(capsys, monkeypatch):
    monkeypatch.setenv("AMOD_THREADS", "1")
    serial = run(capsys, "equilibrium", GRID, "--gamma-sweep", "0.25:0.75:0.25")[1]
    monkeypatch.setenv("AMOD_THREADS", "3")
    parallel = run(capsys, "equilibrium", GRID, "--gamma-sweep", "0.25:0.75:0.25")[1]
    assert serial == parallel


def test_faster_walk_layer_lowers_average_time(capsys, tmp_path):
    p = scaled(tmp_path, GRID_WALK, 2.5)
    slow = report(capsys, "equilibrium", p, "--gamma", "1", "--walk-speed", "3.1")
    fast = report(capsys, "equilibrium", p, "--gamma", "1", "--walk-speed", "10")
    t_slow = slow["scenarios"][0]["metrics"]["avg_time_total"]
    t_fast = fast["scenarios"][0]["metrics"]["avg_time_total"]
    assert t_fast < t_slow
    assert fast["config_hash"] != slow["config_hash"]


# -- recover -------------------------------------------------------------------

def flows_file(tmp_path, g, od, od_flows, xr=None):
    z = np.zeros(g.n_arcs)
    xu = np.sum(od_flows, axis=0) if len(od_flows) else z
    doc = {"flows": flows_block(g, od, od_flows, xu, z if xr is None else xr, z)}
    from amodflow.report import clean
    p = tmp_path / "flows.json"
    p.write_text(json.dumps(clean(doc)))
    return p


def test_recover_single_path(capsys, tmp_path):
    g = build_supergraph(["a", "b", "c"], [("a", "b", 0.1, 100.0), ("b", "c", 0.1, 100.0)])
    od = [ODPair("a", "c", 10.0)]
    net = write_graph(tmp_path, g, {"amod": od}, "line.json")
    fl = flows_file(tmp_path, g, od, np.array([[10.0, 10.0]]))
    doc = report(capsys, "recover", net, "--flows", fl)
    fit = doc["od_routes"][0]
    assert len(fit["routes"]) == 1 and fit["routes"][0]["fraction"] == 1.0
    assert fit["routes"][0]["nodes"] == ["a", "b", "c"]


def test_recover_two_path_split(capsys, tmp_path):
    g = build_supergraph(["s", "a", "b", "t"],
                         [("s", "a", 0.1, 1e3), ("a", "t", 0.1, 1e3),
                          ("s", "b", 0.1, 1e3), ("b", "t", 0.15, 1e3)])
    od = [ODPair("s", "t", 40.0)]
    net = write_graph(tmp_path, g, {"amod": od}, "two.json")
    fl = flows_file(tmp_path, g, od, np.array([[28.0, 28.0, 12.0, 12.0]]))
    doc = report(capsys, "recover", net, "--flows", fl, "--xi", "1e-6")
    fr = {tuple(r["nodes"]): r["fraction"] for r in doc["od_routes"][0]["routes"]}
    assert fr[("s", "a", "t")] == pytest.approx(0.7, abs=1e-6)
    assert fr[("s", "b", "t")] == pytest.approx(0.3, abs=1e-6)
    assert doc["od_routes"][0]["residual"] < 1e-6


def test_recover_rho_zero_infeasible(capsys, tmp_path):
    g = build_supergraph(["o1", "o2", "d1", "d2"],
                         [("o1", "d1", 1.0, 9.0), ("o2", "d1", 1.0, 9.0),
                          ("o1", "d2", 2.0, 9.0), ("o2", "d2", 3.0, 9.0)])
    net = write_graph(tmp_path, g, None, "prune.json")
    fl = flows_file(tmp_path, g, [], np.zeros((0, 4)), xr=np.array([0.0, 1.0, 1.0, 0.0]))
    code, out, _ = run(capsys, "recover", net, "--flows", fl, "--rho", "0")
    assert code == 3 and json.loads(out)["error"]["type"] == "infeasible"
    doc = report(capsys, "recover", net, "--flows", fl, "--rho", "1")
    assert doc["rebalancing"]["residual"] < 1e-8


def test_recover_from_solve_report(capsys, tmp_path):
    out = tmp_path / "solve.json"
    assert run(capsys, "solve", GRID, "--out", out)[0] == 0
    doc = report(capsys, "recover", GRID, "--flows", out)
    assert len(doc["od_routes"]) == 4
    for fit in doc["od_routes"]:
        assert fit["residual"] <= 1e-6 and sum(r["fraction"] for r in fit["routes"]) == pytest.approx(1.0)
    assert doc["rebalancing"]["converged"]


def test_recover_rejects_mismatched_flows(capsys, tmp_path):
    out = tmp_path / "solve.json"
    assert run(capsys, "solve", GRID, "--out", out)[0] == 0
    assert run(capsys, "recover", GRID_WALK, "--flows", out)[0] == 2


# -- ingest --------------------------------------------------------------------

def test_ingest_segments_and_condense(capsys, tmp_path):
    (tmp_path / "s.csv").write_text(
        "id,link_id,speed_mph,freeflow_mph,time_hours,capacity_vph\n"
        "s1,a->b,20,40,0.05,1000\n"
        "s2,b->c,30,30,0.10,800\n"
        "s3,c->a,30,30,0.10,900\n")
    (tmp_path / "sp.csv").write_text("segment_id,timestamp,speed_mph\ns1,0,18\ns1,1,22\n")
    net = tmp_path / "net.json"
    code, _, err = run(capsys, "ingest", "--segments", tmp_path / "s.csv",
                       "--speeds", tmp_path / "sp.csv", "--out", net,
                       "--synthetic-demand", "uniform", "--total-demand", "600")
    assert code == 0, err
    loaded = load_network(net)
    assert loaded.graph.n_arcs == 3 and len(loaded.total) == 6

    (tmp_path / "hubs.json").write_text(json.dumps({"hubs": ["a", "c"], "zones": ["a"]}))
    small = tmp_path / "small.json"
    assert run(capsys, "ingest", "--network", net, "--condense", tmp_path / "hubs.json",
               "--out", small)[0] == 0
    doc = json.loads(small.read_text())
    assert sorted(n["id"] for n in doc["nodes"]) == ["a", "c"]
    ac = [a for a in doc["arcs"] if (a["tail"], a["head"]) == ("a", "c")][0]
    # a->b keeps its 0.05 h * 20 mph = 1 mile, now at 20 mph mean: t0 = 20*0.05/22, then b->c 0.1
    assert ac["t0_hours"] == pytest.approx(20 * 0.05 / 22 + 0.1)
    assert ac["capacity_vph"] == 800.0
