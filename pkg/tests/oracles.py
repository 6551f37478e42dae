"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import heapq
import itertools
import math

import numpy as np
from scipy import ndimage

SQRT2 = math.sqrt(2.0)


def cave(rng: np.random.Generator, h: int = 40, w: int = 40, p: float = 0.55) -> np.ndarray:
    """Cellular-automaton cave; True = free."""
    m = rng.random((h, w)) < p
    for _ in range(4):
        n = ndimage.convolve(m.astype(int), np.ones((3, 3)), mode="constant") - m
        m = (n >= 5) | (m & (n >= 4))
    return m


def plus_fixture() -> np.ndarray:
    """15x15 free plus: two 3-wide corridors crossing at the center."""
    m = np.zeros((15, 15), bool)
    m[6:9, :] = True
    m[:, 6:9] = True
    return m


def components(mask: np.ndarray) -> int:
    return int(ndimage.label(mask, structure=np.ones((3, 3)))[1])


def expected_cost_by_hand(probs, dist, order) -> float:
    """Sum_k p(order[k]) * (d(start, o1) + ... + d(o_{k-1}, o_k)); start index 0."""
    total, prefix, prev = 0.0, 0.0, 0
    for i in order:
        prefix += dist[prev][i + 1]
        total += probs[i] * prefix
        prev = i + 1
    return total


def brute_min(probs, dist) -> float:
    return min(expected_cost_by_hand(probs, dist, perm)
               for perm in itertools.permutations(range(len(probs))))


def dijkstra_octile(cost: np.ndarray, start, goal) -> float:
    """Plain Dijkstra over 8-connected cells; a move costs step length times the mean cell
    cost of its two ends; diagonals may not cut blocked corners."""
    h, w = cost.shape
    dist = {start: 0.0}
    pq = [(0.0, start)]
    while pq:
        d, (r, c) = heapq.heappop(pq)
        if (r, c) == goal:
            return d
        if d > dist[(r, c)]:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if not (dr or dc):
                    continue
                nr, nc = r + dr, c + dc
                if not (0 <= nr < h and 0 <= nc < w) or not math.isfinite(cost[nr, nc]):
                    continue
                if dr and dc and not (math.isfinite(cost[r + dr, c]) and math.isfinite(cost[r, c + dc])):
                    continue
                step = SQRT2 if dr and dc else 1.0
                nd = d + step * 0.5 * (cost[r, c] + cost[nr, nc])
                if nd < dist.get((nr, nc), math.inf) - 1e-12:
                    dist[(nr, nc)] = nd
                    heapq.heappush(pq, (nd, (nr, nc)))
    return math.inf


def random_graph_and_objects(rng: np.random.Generator, n_nodes: int, n_objects: int,
                             size: int = 30, resolution: float = 0.25):
    """SkeletonGraph with random node cells (a chain of edges) plus an ObjectMap whose
    best-view poses are random points."""
    from ssmg_nav.mapping import ObjectMap, ObjectRecord, View
    from ssmg_nav.sim_env import Pose
    from ssmg_nav.skeleton import NodeKind, SkelEdge, SkeletonGraph, SkelNode

    cells = set()
    while len(cells) < n_nodes:
        cells.add((int(rng.integers(size)), int(rng.integers(size))))
    cells = sorted(cells)
    kinds = [NodeKind.JUNCTION if rng.random() < 0.4 else NodeKind.ENDPOINT for _ in cells]
    nodes = [SkelNode(i, k, c) for i, (k, c) in enumerate(zip(kinds, cells))]
    edges = [SkelEdge(i, i + 1, (), 1.0) for i in range(n_nodes - 1)]
    graph = SkeletonGraph(nodes, edges, resolution)
    omap = ObjectMap()
    for j in range(n_objects):
        x, y = rng.random(2) * size * resolution
        rid = f"obj_{j}"
        omap.records[rid] = ObjectRecord(rid, "cup", frozenset({(0, 0)}), (float(x), float(y)),
                                         [View(Pose(float(x), float(y)), "cup", 0.5)])
    return graph, omap


def closure_oracle(graph, omap):
    """Brute-force nearest node, radius and closed membership per node."""
    res = graph.resolution
    pos = {n.node_id: ((n.cell[1] + 0.5) * res, (n.cell[0] + 0.5) * res) for n in graph.nodes}
    view = {j: (r.views[0].pose.x, r.views[0].pose.y) for j, r in omap.records.items()}

    def d(n, j):
        return math.hypot(pos[n][0] - view[j][0], pos[n][1] - view[j][1])

    nearest = {}
    for j in view:
        best = None
        for n in sorted(pos):
            if best is None or d(n, j) < d(best, j):
                best = n
        nearest[j] = best
    radius = {n: max([d(n, j) for j in view if nearest[j] == n] or [0.0]) for n in pos}
    members = {n: {j for j in view if nearest[j] == n or d(n, j) <= radius[n]} for n in pos}
    return nearest, radius, members
