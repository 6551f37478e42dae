from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import plus_fixture
from ssmg_nav.belief import (NEUTRAL_BELIEF, BeliefCache, CooccurrenceProvider, OracleProvider,
                             ProviderFailure, RandomProvider, RemoteProvider, build_node_prompt,
                             evaluate_endpoint_beliefs, propagate_to_junctions)
from ssmg_nav.goals import GoalSpec, Modality
from ssmg_nav.grid import cell_center
from ssmg_nav.knowledge import FLOOR
from ssmg_nav.mapping import FREE, ObjectMap, ObjectRecord, OccupancyGrid, View
from ssmg_nav.sim_env import GroundTruthObject, Pose, WorldMap
from ssmg_nav.skeleton import extract_graph, thin
from ssmg_nav.ssmg import UnknownNode, attach_objects, augment_edges

RES = 0.25
SOFA = GoalSpec(Modality.CATEGORY, "sofa", target_ids=("sofa_0",))
CATS = ["sofa", "armchair", "tv", "toilet", "fridge", "bed", "cup", "plant"]


def rec(rid, cat, cell, room=""):
    x, y = cell_center(cell, RES)
    return ObjectRecord(rid, cat, frozenset({cell}), (x, y), [View(Pose(x, y), f"red {cat}", 0.5)],
                        room=room)


def plus_ssmg(records=()):
    omap = ObjectMap({r.instance_id: r for r in records})
    return augment_edges(attach_objects(extract_graph(thin(plus_fixture()), RES), omap)), omap


def plus_grid():
    g = OccupancyGrid.empty(15, 15, RES)
    g.labels[plus_fixture()] = FREE
    return g


class Failing:
    name = "failing"

    def evaluate(self, artifact):
        raise ProviderFailure(artifact.node_id, "offline")


# ----------------------------------------------------------------------------- prompts

def test_empty_endpoint_prompt():
    s, omap = plus_ssmg()
    art = build_node_prompt(s, s.endpoints[0].node_id, SOFA, omap, plus_grid())
    assert art.text_block == () and art.annotations == () and art.context == ()
    assert art.bev_shape == (12, 12)  # 3 m crop at 0.25 m


def test_three_object_prompt_lines_and_annotations():
    recs = [rec("c_2", "cup", (7, 1)), rec("a_0", "tv", (7, 0)), rec("b_1", "plant", (6, 1))]
    s, omap = plus_ssmg(recs)
    node = s.nearest["a_0"]
    assert s.node(node).objects == {"a_0", "b_1", "c_2"}
    art = build_node_prompt(s, node, SOFA, omap, plus_grid())
    assert [ln.object_id for ln in art.text_block] == ["a_0", "b_1", "c_2"]
    assert {a[0] for a in art.annotations} == {ln.object_id for ln in art.text_block}
    side = max(2 * s.node(node).radius, 3.0) / RES
    assert art.bev_shape == (int(np.ceil(side)),) * 2


def test_prompt_is_byte_deterministic():
    recs = [rec("sofa_0", "sofa", (7, 1))]
    a = build_node_prompt(*plus_ssmg(recs)[:1], 0, SOFA, plus_ssmg(recs)[1], plus_grid())
    b = build_node_prompt(*plus_ssmg(recs)[:1], 0, SOFA, plus_ssmg(recs)[1], plus_grid())
    assert a.to_bytes() == b.to_bytes()
    assert "sofa" in a.instruction()


def test_unknown_node():
    s, omap = plus_ssmg()
    with pytest.raises(UnknownNode):
        build_node_prompt(s, 999, SOFA, omap)


def test_junction_context_holds_evaluated_endpoints():
    s, omap = plus_ssmg([rec("tv_0", "tv", (7, 0))])
    (j,) = s.junctions
    ends = s.adjacent_endpoints(j.node_id)
    assert len(ends) == 4
    art = build_node_prompt(s, j.node_id, SOFA, omap, plus_grid(),
                            {ends[0]: 0.4, ends[1]: 0.2})
    assert [c.node_id for c in art.context] == ends[:2]
    assert "Neighbouring end nodes" in art.instruction()


# ----------------------------------------------------------------------------- providers

def test_goal_category_endpoint_scores_high_and_empty_endpoint_floor():
    s, omap = plus_ssmg([rec("sofa_0", "sofa", (7, 0))])
    table = evaluate_endpoint_beliefs(s, SOFA, CooccurrenceProvider(), omap, plus_grid())
    hit = s.nearest["sofa_0"]
    assert table[hit] >= 0.9
    for n in s.endpoints:
        if n.node_id != hit:
            assert table[n.node_id] == pytest.approx(FLOOR)
    assert set(table.beliefs) == {n.node_id for n in s.endpoints}


def test_endpoint_table_cached_per_revision():
    s, omap = plus_ssmg([rec("tv_0", "tv", (7, 0))])
    cache = BeliefCache()
    t1 = evaluate_endpoint_beliefs(s, SOFA, CooccurrenceProvider(), omap, cache=cache)
    misses = cache.misses
    t2 = evaluate_endpoint_beliefs(s, SOFA, CooccurrenceProvider(), omap, cache=cache)
    assert t1.beliefs == t2.beliefs
    assert cache.misses == misses and cache.hits == len(s.endpoints)
    s.revision += 1
    evaluate_endpoint_beliefs(s, SOFA, CooccurrenceProvider(), omap, cache=cache)
    assert cache.misses == 2 * misses


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(CATS), st.sampled_from([(7, 0), (7, 14), (0, 7), (14, 7),
                                                                  (6, 6), (8, 8), (7, 3), (3, 7)])),
                max_size=6))
def test_junction_bounded_by_endpoint_context_and_own_objects(placed):
    recs = [rec(f"o_{i}", cat, cell) for i, (cat, cell) in enumerate(placed)]
    s, omap = plus_ssmg(recs)
    prov = CooccurrenceProvider()
    ep = evaluate_endpoint_beliefs(s, SOFA, prov, omap)
    table = propagate_to_junctions(s, ep, SOFA, prov, omap)
    (j,) = s.junctions
    own = max([prov.table.object_score(omap.records[o].category, "", frozenset(), SOFA)
               for o in j.objects] + [FLOOR])
    ctx = max(ep[e] for e in s.adjacent_endpoints(j.node_id))
    assert table[j.node_id] <= max(ctx, own) + 1e-12
    assert all(0.0 <= v <= 1.0 for v in table.beliefs.values())


def test_all_floor_endpoints_give_floor_junction():
    s, omap = plus_ssmg()
    prov = CooccurrenceProvider()
    table = propagate_to_junctions(s, evaluate_endpoint_beliefs(s, SOFA, prov, omap), SOFA, prov,
                                   omap)
    assert table[s.junctions[0].node_id] <= FLOOR + 1e-12


def test_oracle_junction_strictly_maximal():
    free = plus_fixture()
    world = WorldMap(RES, ~free, [GroundTruthObject("sofa_0", "sofa", cell_center((6, 6), RES),
                                                    frozenset({(6, 6)}), ("sofa",), "")])
    s, omap = plus_ssmg()
    prov = OracleProvider(world)
    ep = evaluate_endpoint_beliefs(s, SOFA, prov, omap)
    table = propagate_to_junctions(s, ep, SOFA, prov, omap)
    (j,) = s.junctions
    assert all(table[j.node_id] > table[n.node_id] for n in s.endpoints)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_provider_outputs_in_unit_interval(seed, sigma):
    free = plus_fixture()
    world = WorldMap(RES, ~free, [GroundTruthObject("sofa_0", "sofa", cell_center((7, 1), RES),
                                                    frozenset({(7, 1)}), ("sofa",), "")])
    s, omap = plus_ssmg([rec("sofa_0", "sofa", (7, 1))])
    for prov in (OracleProvider(world, sigma, seed=seed), RandomProvider(seed), CooccurrenceProvider()):
        for n in s.nodes:
            v = prov.evaluate(build_node_prompt(s, n, SOFA, omap))
            assert 0.0 <= v <= 1.0
            assert v == prov.evaluate(build_node_prompt(s, n, SOFA, omap))


def test_provider_failure_neutral_fallback_and_propagation():
    s, omap = plus_ssmg()
    table = evaluate_endpoint_beliefs(s, SOFA, Failing(), omap)
    assert all(v == NEUTRAL_BELIEF for v in table.beliefs.values())
    assert sorted(table.failures) == sorted(n.node_id for n in s.endpoints)
    with pytest.raises(ProviderFailure) as exc:
        evaluate_endpoint_beliefs(s, SOFA, Failing(), omap, fallback=None)
    assert exc.value.node_id == s.endpoints[0].node_id


def test_corridor_has_no_junction_beliefs():
    m = np.zeros((5, 15), bool)
    m[1:4, 1:14] = True
    s = attach_objects(extract_graph(thin(m), RES), ObjectMap())
    prov = CooccurrenceProvider()
    ep = evaluate_endpoint_beliefs(s, SOFA, prov, ObjectMap())
    table = propagate_to_junctions(s, ep, SOFA, prov, ObjectMap())
    assert not s.junctions and table.beliefs == ep.beliefs


# ----------------------------------------------------------------------------- remote

class _Handler(BaseHTTPRequestHandler):
    bodies: list = []

    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.bodies.append(body)
        reply = json.dumps({"belief": 0.75} if body["node_id"] >= 0 else {"nope": 1}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(reply)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/"
    srv.shutdown()
    srv.server_close()


def test_remote_provider_wire_format(server):
    s, omap = plus_ssmg([rec("sofa_0", "sofa", (7, 1))])
    art = build_node_prompt(s, s.nearest["sofa_0"], SOFA, omap, plus_grid())
    assert RemoteProvider(server).evaluate(art) == 0.75
    body = _Handler.bodies[-1]
    assert set(body) == {"node_id", "goal", "text_block", "image_b64", "instruction"}
    assert body["text_block"] == [["sofa_0", "sofa", "red sofa"]]


def test_remote_provider_bad_reply_and_unreachable(server):
    s, omap = plus_ssmg()
    art = build_node_prompt(s, 0, SOFA, omap)
    bad = art.__class__(**{**art.__dict__, "node_id": -1})
    with pytest.raises(ProviderFailure):
        RemoteProvider(server).evaluate(bad)
    with pytest.raises(ProviderFailure):
        RemoteProvider("http://127.0.0.1:9/", timeout=0.5).evaluate(art)
