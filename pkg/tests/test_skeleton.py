from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import cave, components, plus_fixture
from ssmg_nav.mapping import FREE, OCCUPIED, OccupancyGrid
from ssmg_nav.skeleton import (CONNECTOR_PX, ENDPOINT_PX, JUNCTION_PX, EmptyFreeSpace, NodeKind,
                               classify_pixels, degree, extract_graph, free_mask, match_node_ids,
                               skeleton_graph, thin)


def no_block(s: np.ndarray) -> bool:
    return not (s[:-1, :-1] & s[1:, :-1] & s[:-1, 1:] & s[1:, 1:]).any()


def accounted(g, s) -> bool:
    n_px = len(g.nodes) + sum(len(n.members) for n in g.nodes) + sum(len(e.chain) for e in g.edges)
    return n_px == int(s.sum()) and g.pixels() == set(map(tuple, np.argwhere(s)))


def test_plus_centerlines_meet_at_degree_four():
    s = thin(plus_fixture())
    assert s[7, 7] and degree(s)[7, 7] == 4
    assert no_block(s)
    assert components(s) == 1


def test_plus_center_is_junction():
    s = thin(plus_fixture())
    assert classify_pixels(s)[7, 7] == JUNCTION_PX


def test_plus_graph():
    s = thin(plus_fixture())
    g = extract_graph(s)
    assert len(g.of_kind(NodeKind.ENDPOINT)) == 4
    (j,) = g.of_kind(NodeKind.JUNCTION)
    assert j.cell == (7, 7)
    assert len(g.edges) == 4
    assert all(j.node_id in (e.a, e.b) for e in g.edges)
    assert accounted(g, s)


def test_straight_corridor_two_endpoints_one_edge():
    m = np.zeros((7, 12), bool)
    m[2:5, 1:11] = True
    s = thin(m)
    g = extract_graph(s, resolution=0.25)
    assert [n.kind for n in g.nodes] == [NodeKind.ENDPOINT, NodeKind.ENDPOINT]
    assert len(g.edges) == 1 and g.edges[0].length > 0


def test_pure_loop_gets_a_node():
    m = np.zeros((12, 12), bool)
    m[1:11, 1:11] = True
    m[4:8, 4:8] = False
    s = thin(m)
    g = extract_graph(s)
    assert g.nodes and accounted(g, s)
    assert components(s) == 1


def test_empty_free_space():
    with pytest.raises(EmptyFreeSpace):
        thin(np.zeros((5, 5), bool))


def test_classify_kinds():
    s = np.zeros((5, 5), bool)
    s[2, 0:4] = True
    k = classify_pixels(s)
    assert k[2, 0] == ENDPOINT_PX and k[2, 1] == CONNECTOR_PX and k[2, 3] == ENDPOINT_PX
    assert JUNCTION_PX not in k


def test_free_mask_fills_unknown_pinholes():
    g = OccupancyGrid.empty(5, 5, 0.25)
    g.labels[:, :] = FREE
    g.labels[2, 2] = 0
    assert free_mask(g)[2, 2]
    g.labels[1, 2] = OCCUPIED
    assert not free_mask(g)[2, 2]


def test_node_ids_are_stable_under_small_changes():
    m = plus_fixture()
    g0, nxt = match_node_ids(None, extract_graph(thin(m)), 0)
    m2 = m.copy()
    m2[6:9, 14] = False  # shorten one arm
    g1, nxt2 = match_node_ids(g0, extract_graph(thin(m2)), nxt)
    j0 = g0.of_kind(NodeKind.JUNCTION)[0].node_id
    j1 = g1.of_kind(NodeKind.JUNCTION)[0].node_id
    assert j0 == j1
    assert len({n.node_id for n in g1.nodes}) == len(g1.nodes)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_thinning_invariants_on_caves(seed):
    m = cave(np.random.default_rng(seed), 24, 24)
    if not m.any():
        return
    s = thin(m)
    assert not np.any(s & ~m)
    assert no_block(s)
    assert components(s) == components(m)
    assert accounted(extract_graph(s), s)


def test_skeleton_graph_on_grid():
    g = OccupancyGrid.empty(15, 15, 0.25)
    g.labels[plus_fixture()] = FREE
    sg = skeleton_graph(g)
    assert sg.resolution == 0.25 and len(sg.nodes) == 5
