"""Long-horizon visitation planning, frontier extraction and grid A*.

Candidates are visited in the order that minimizes expected travel before
the target is found: each candidate's probability weighs the cumulative path
length needed to reach it. The agent's pose is a fixed zero-probability first
stop, so the approach leg to the first candidate counts.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .grid import SQRT2, Cell, NEIGHBORS8, cell_center, graph_distances, grid_graph
from .mapping import OccupancyGrid, ValueMap
from .sim_env import Pose

MAX_BRUTE_FORCE = 9
IMPROVE_EPS = 1e-12


class TooLarge(ValueError):
    pass


class NoPath(RuntimeError):
    pass


def softmax_probs(beliefs, tau: float = 1.0) -> np.ndarray:
    b = np.asarray(beliefs, dtype=float)
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if b.size == 0:
        raise ValueError("need at least one belief")
    z = (b - b.max()) / tau
    e = np.exp(z)
    return e / e.sum()


@dataclass
class PlanInstance:
    """Visitation problem. ``dist`` row/column 0 is the start; candidate i sits at i + 1."""

    probs: np.ndarray
    dist: np.ndarray
    candidates: list = field(default_factory=list)  # (node id, position) payloads
    start: Pose | None = None

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        self.dist = np.asarray(self.dist, dtype=float)
        n = self.probs.size
        if n < 1:
            raise ValueError("need at least one candidate")
        if self.dist.shape != (n + 1, n + 1):
            raise ValueError(f"dist must be {(n + 1, n + 1)}, got {self.dist.shape}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        if not np.all(np.isfinite(self.dist)):
            raise ValueError("distances must be finite")
        if np.any(np.diag(self.dist) != 0) or not np.allclose(self.dist, self.dist.T, atol=1e-9):
            raise ValueError("distance matrix must be symmetric with zero diagonal")

    @property
    def n(self) -> int:
        return self.probs.size

    @classmethod
    def from_points(cls, start: tuple[float, float], points, probs) -> "PlanInstance":
        pts = np.vstack([np.asarray(start, dtype=float)[None, :], np.asarray(points, dtype=float)])
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        return cls(np.asarray(probs, dtype=float), d, [(i, tuple(p)) for i, p in enumerate(points)])


@dataclass(frozen=True)
class VisitOrder:
    order: tuple[int, ...]
    expected_cost: float
    sweeps: int = 0


def expected_cost(inst: PlanInstance, order, free_first: bool = False) -> float:
    """Sum over visit positions of p(candidate) times the travel needed to reach it.

    ``free_first=True`` drops the approach leg from the start to the first
    candidate (the literal reading that leaves the first stop uncounted).
    """
    total, travel = 0.0, 0.0
    prev = 0
    for k, i in enumerate(order):
        if k > 0 or not free_first:
            travel += inst.dist[prev, i + 1]
        total += inst.probs[i] * travel
        prev = i + 1
    return float(total)


def greedy_order(inst: PlanInstance, free_first: bool = False) -> VisitOrder:
    """Nearest-unvisited chain from the start; ties go to the lower index."""
    left = list(range(inst.n))
    order, prev = [], 0
    while left:
        nxt = min(left, key=lambda i: (inst.dist[prev, i + 1], i))
        order.append(nxt)
        left.remove(nxt)
        prev = nxt + 1
    return VisitOrder(tuple(order), expected_cost(inst, order, free_first))


def two_opt(inst: PlanInstance, init: VisitOrder, max_sweeps: int = 100,
            best_improvement: bool = False, free_first: bool = False) -> VisitOrder:
    """Segment-reversal local search; never returns a costlier order than ``init``."""
    order = list(init.order)
    cost = expected_cost(inst, order, free_first)
    n = len(order)
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        improved = False
        best = None
        for p in range(n - 1):
            for q in range(p + 1, n):
                cand = order[:p] + order[p:q + 1][::-1] + order[q + 1:]
                c = expected_cost(inst, cand, free_first)
                if c < cost - IMPROVE_EPS:
                    if best_improvement:
                        if best is None or c < best[0]:
                            best = (c, cand)
                    else:
                        order, cost, improved = cand, c, True
        if best is not None:
            cost, order = best
            improved = True
        if not improved:
            break
    return VisitOrder(tuple(order), cost, sweeps)


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp).reshape(-1, n)


def brute_force_order(inst: PlanInstance, free_first: bool = False) -> VisitOrder:
    """Exact minimizer over all permutations; ties go to the lexicographically first."""
    if inst.n > MAX_BRUTE_FORCE:
        raise TooLarge(f"brute force limited to {MAX_BRUTE_FORCE} candidates, got {inst.n}")
    perms = _permutations(inst.n)
    stops = perms + 1
    prev = np.hstack([np.zeros((len(perms), 1), np.intp), stops[:, :-1]])
    legs = inst.dist[prev, stops]
    if free_first:
        legs[:, 0] = 0.0
    costs = (inst.probs[perms] * np.cumsum(legs, axis=1)).sum(axis=1)
    k = int(np.flatnonzero(costs <= costs.min() + IMPROVE_EPS)[0])
    order = tuple(int(i) for i in perms[k])
    return VisitOrder(order, expected_cost(inst, order, free_first))


def solve(inst: PlanInstance, method: str = "lhp", max_sweeps: int = 100,
          best_improvement: bool = False, free_first: bool = False) -> VisitOrder:
    """``lhp``: greedy-initialized 2-opt; ``nearest``: greedy chain only; ``brute``: exact."""
    if method == "brute":
        return brute_force_order(inst, free_first)
    init = greedy_order(inst, free_first)
    if method == "nearest":
        return init
    if method != "lhp":
        raise ValueError(f"unknown solver {method!r}")
    return two_opt(inst, init, max_sweeps, best_improvement, free_first)


def instance_from_json(doc: dict) -> PlanInstance:
    """Instance file: {"probs": [...], "points": [[x, y], ...], "start": [x, y]} with an
    optional "distances" (N+1)x(N+1) matrix overriding the Euclidean one (row 0 = start)."""
    try:
        probs = np.asarray(doc["probs"], dtype=float)
        points = [tuple(map(float, p)) for p in doc["points"]]
        start = tuple(map(float, doc.get("start", (0.0, 0.0))))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"bad instance: {exc}") from exc
    if len(points) != probs.size:
        raise ValueError(f"{probs.size} probabilities for {len(points)} points")
    if "distances" in doc:
        return PlanInstance(probs, np.asarray(doc["distances"], dtype=float),
                            [(i, p) for i, p in enumerate(points)])
    return PlanInstance.from_points(start, points, probs)


def load_instance(path) -> PlanInstance:
    with open(path) as f:
        return instance_from_json(json.load(f))


# ----------------------------------------------------------------------------- frontiers

_EIGHT = np.ones((3, 3), dtype=bool)


def frontier_mask(grid: OccupancyGrid) -> np.ndarray:
    unknown_near = ndimage.binary_dilation(grid.unknown, structure=_EIGHT)
    return grid.free & unknown_near


def cluster_frontiers(grid: OccupancyGrid, min_size: int = 3,
                      exclude: np.ndarray | None = None) -> list[Cell]:
    """Frontier clusters (8-connected) of at least ``min_size`` cells, each reduced to
    the member cell nearest its centroid (ties in raster order).

    Cells set in ``exclude`` are dropped before clustering.
    """
    mask = frontier_mask(grid)
    if exclude is not None:
        mask &= ~exclude
    labels, n = ndimage.label(mask, structure=_EIGHT)
    points = []
    for k in range(1, n + 1):
        rr, cc = np.nonzero(labels == k)
        if rr.size < min_size:
            continue
        d = (rr - rr.mean()) ** 2 + (cc - cc.mean()) ** 2
        i = int(np.argmin(d))  # nonzero is raster ordered, argmin keeps the first minimum
        points.append((int(rr[i]), int(cc[i])))
    return points


def frontier_beliefs(vmap: ValueMap, points: list[Cell], resolution: float,
                     radius_m: float = 0.5) -> list[float]:
    """Max confident value within ``radius_m`` of each point."""
    h, w = vmap.value.shape
    val = np.where(vmap.confidence > 0, vmap.value, 0.0)
    k = int(math.floor(radius_m / resolution + 1e-9))
    out = []
    for r, c in points:
        best = 0.0
        for dr in range(-k, k + 1):
            for dc in range(-k, k + 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and math.hypot(dr, dc) * resolution <= radius_m + 1e-9:
                    best = max(best, float(val[rr, cc]))
        out.append(best)
    return out


# ----------------------------------------------------------------------------- paths

def traversal_cost(grid: OccupancyGrid, unknown_cost: float | None = 2.0) -> np.ndarray:
    """Per-cell cost: free 1, unknown ``unknown_cost`` (None blocks it), occupied blocked."""
    cost = np.full(grid.shape, np.inf)
    cost[grid.free] = 1.0
    if unknown_cost is not None:
        cost[grid.unknown] = unknown_cost
    return cost


def plan_astar(cost: np.ndarray, start: Cell, goal) -> list[Cell]:
    """8-connected A*; moving a->b costs step * (cost[a] + cost[b]) / 2, no corner cutting.

    ``goal`` is one cell or a collection of cells (the path ends at the cheapest
    one to reach). The start cell is always treated as passable.
    """
    h, w = cost.shape
    goals = [goal] if isinstance(goal, tuple) and len(goal) == 2 and isinstance(goal[0], (int, np.integer)) \
        else [tuple(g) for g in goal]
    goals = [g for g in goals if 0 <= g[0] < h and 0 <= g[1] < w and math.isfinite(cost[g])]
    if not goals:
        raise NoPath(f"goal {goal} is blocked")
    goal_set = set(goals)
    cost = cost.copy()
    if not math.isfinite(cost[start]):
        cost[start] = 1.0
    if start in goal_set:
        return [start]
    floor = float(np.min(cost[np.isfinite(cost)]))
    # octile distance to the goals' bounding box: admissible, consistent and O(1)
    gr0, gr1 = min(g[0] for g in goals), max(g[0] for g in goals)
    gc0, gc1 = min(g[1] for g in goals), max(g[1] for g in goals)
    diag = SQRT2 - 2.0

    def heuristic(cell: Cell) -> float:
        r, c = cell
        dr = gr0 - r if r < gr0 else (r - gr1 if r > gr1 else 0)
        dc = gc0 - c if c < gc0 else (c - gc1 if c > gc1 else 0)
        return floor * (dr + dc + diag * (dr if dr < dc else dc))

    inf = math.inf
    rows = cost.tolist()
    g = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    tie = itertools.count()
    heap = [(heuristic(start), next(tie), start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur in goal_set:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        closed.add(cur)
        r, c = cur
        gc = g[cur]
        here = rows[r][c]
        for dr, dc, step in NEIGHBORS8:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            cn = rows[nr][nc]
            if cn == inf:
                continue
            if dr and dc and (rows[r + dr][c] == inf or rows[r][c + dc] == inf):
                continue
            nd = gc + step * 0.5 * (here + cn)
            nxt = (nr, nc)
            if nd < g.get(nxt, inf) - 1e-12:
                g[nxt] = nd
                parent[nxt] = cur
                heapq.heappush(heap, (nd + heuristic(nxt), next(tie), nxt))
    raise NoPath(f"no path from {start} to {goal}")


def path_cost(cost: np.ndarray, path: list[Cell]) -> float:
    total = 0.0
    for a, b in zip(path, path[1:]):
        step = SQRT2 if a[0] != b[0] and a[1] != b[1] else 1.0
        total += step * 0.5 * (cost[a] + cost[b])
    return total


def path_length(path: list[Cell], resolution: float) -> float:
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += SQRT2 if a[0] != b[0] and a[1] != b[1] else 1.0
    return total * resolution


def lookahead(path: list[Cell], distance_m: float, resolution: float) -> Pose:
    """Point at arc length ``distance_m`` along the path's cell centers (or its end)."""
    if not path:
        raise ValueError("empty path")
    pts = [cell_center(c, resolution) for c in path]
    travelled = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        seg = math.hypot(x1 - x0, y1 - y0)
        heading = math.atan2(y1 - y0, x1 - x0)
        if travelled + seg >= distance_m - 1e-9:
            t = (distance_m - travelled) / seg
            return Pose(x0 + t * (x1 - x0), y0 + t * (y1 - y0), heading)
        travelled += seg
    heading = 0.0
    if len(pts) > 1:
        heading = math.atan2(pts[-1][1] - pts[-2][1], pts[-1][0] - pts[-2][0])
    return Pose(pts[-1][0], pts[-1][1], heading)


def distances_from(cost: np.ndarray, start: Cell, cells: list[Cell], resolution: float):
    """Geodesic meters from ``start`` to each cell (inf if unreachable) and the
    start's predecessor map; the single-source counterpart of :func:`distance_matrix`."""
    cost = cost.copy()
    if not math.isfinite(cost[start]):
        cost[start] = 1.0
    d, pred = graph_distances(grid_graph(cost), cost.shape, [start], predecessors=True)
    return [float(d[0][c]) * resolution for c in cells], pred[0]


def distance_matrix(cost: np.ndarray, start: Cell, cells: list[Cell], resolution: float,
                    with_predecessors: bool = False):
    """Geodesic meters among [start] + reachable cells; also returns the kept indices.

    ``with_predecessors=True`` appends the (h, w) predecessor map of the start,
    from which exact shortest paths out of ``start`` can be traced.
    """
    cost = cost.copy()
    if not math.isfinite(cost[start]):
        cost[start] = 1.0
    graph = grid_graph(cost)
    d, pred = graph_distances(graph, cost.shape, [start] + list(cells), predecessors=True)
    pts = [start] + list(cells)
    flat = np.array([[d[i][c] for c in pts] for i in range(len(pts))])
    keep = [i for i in range(len(cells)) if math.isfinite(flat[0, i + 1])]
    idx = [0] + [i + 1 for i in keep]
    sub = flat[np.ix_(idx, idx)]
    sub = 0.5 * (sub + sub.T) * resolution
    np.fill_diagonal(sub, 0.0)
    if with_predecessors:
        return sub, keep, pred[0]
    return sub, keep


def build_instance(cost: np.ndarray, start: Pose, cells: list[Cell], beliefs: list[float],
                   resolution: float, tau: float = 1.0, payloads: list | None = None,
                   with_predecessors: bool = False):
    """Plan instance over the reachable subset of ``cells`` (None when nothing is reachable)
    and the kept indices; optionally the start's predecessor map as a third item."""
    d, keep, pred = distance_matrix(cost, start.cell(resolution), cells, resolution, True)
    inst = None
    if keep:
        probs = softmax_probs([beliefs[i] for i in keep], tau)
        pay = [payloads[i] if payloads else (i, cells[i]) for i in keep]
        inst = PlanInstance(probs, d, pay, start)
    if with_predecessors:
        return inst, keep, pred
    return inst, keep
