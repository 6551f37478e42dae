"""Shared grid geometry: cell/world conversion, line traversal, grid shortest paths."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

Cell = tuple[int, int]  # (row, col)

SQRT2 = math.sqrt(2.0)

# (drow, dcol, step length in cells)
NEIGHBORS8 = (
    (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
    (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2),
)


def world_to_cell(x: float, y: float, resolution: float) -> Cell:
    return int(math.floor(y / resolution)), int(math.floor(x / resolution))


def cell_center(cell: Cell, resolution: float) -> tuple[float, float]:
    r, c = cell
    return (c + 0.5) * resolution, (r + 0.5) * resolution


def in_bounds(cell: Cell, shape: tuple[int, int]) -> bool:
    return 0 <= cell[0] < shape[0] and 0 <= cell[1] < shape[1]


def traverse(x0: float, y0: float, dx: float, dy: float, max_t: float,
             resolution: float, shape: tuple[int, int]) -> Iterator[tuple[Cell, float]]:
    """Yield (cell, entry distance) for every cell a ray crosses, in order.

    Amanatides-Woo stepping. The ray starts at (x0, y0) with unit direction
    (dx, dy) and stops after ``max_t`` meters or when it leaves the grid.
    When the ray passes exactly through a cell corner, the step goes to the
    neighbour with the lower row-major index first.
    """
    r, c = world_to_cell(x0, y0, resolution)
    if not in_bounds((r, c), shape):
        return
    yield (r, c), 0.0
    step_c = 1 if dx > 0 else -1
    step_r = 1 if dy > 0 else -1
    if abs(dx) > 1e-12:
        next_x = (c + (1 if dx > 0 else 0)) * resolution
        t_max_x = (next_x - x0) / dx
        t_delta_x = resolution / abs(dx)
    else:
        t_max_x = t_delta_x = math.inf
    if abs(dy) > 1e-12:
        next_y = (r + (1 if dy > 0 else 0)) * resolution
        t_max_y = (next_y - y0) / dy
        t_delta_y = resolution / abs(dy)
    else:
        t_max_y = t_delta_y = math.inf
    h, w = shape
    while True:
        if abs(t_max_x - t_max_y) < 1e-12:
            # corner crossing: row step first only if it lowers the index
            if step_r < 0:
                t = t_max_y
                r += step_r
                t_max_y += t_delta_y
            else:
                t = t_max_x
                c += step_c
                t_max_x += t_delta_x
        elif t_max_x < t_max_y:
            t = t_max_x
            c += step_c
            t_max_x += t_delta_x
        else:
            t = t_max_y
            r += step_r
            t_max_y += t_delta_y
        if t > max_t or not (0 <= r < h and 0 <= c < w):
            return
        yield (r, c), t


def ray_cells(x0: float, y0: float, dx: float, dy: float, max_t: float, resolution: float,
              shape: tuple[int, int], blocked=None) -> tuple[list[Cell], float | None]:
    """List form of :func:`traverse` that can stop at the first ``blocked`` cell.

    ``blocked`` is a boolean array or nested list indexed [row][col]. Returns
    the crossed cells (the blocking cell included) and the entry distance of
    the blocking cell, or None when nothing blocked the ray.
    """
    r, c = int(math.floor(y0 / resolution)), int(math.floor(x0 / resolution))
    h, w = shape
    if not (0 <= r < h and 0 <= c < w):
        return [], None
    if isinstance(blocked, np.ndarray):
        blocked = blocked.tolist()
    cells = [(r, c)]
    if blocked is not None and blocked[r][c]:
        return cells, 0.0
    step_c = 1 if dx > 0 else -1
    step_r = 1 if dy > 0 else -1
    inf = math.inf
    if dx > 1e-12 or dx < -1e-12:
        t_max_x = ((c + (1 if dx > 0 else 0)) * resolution - x0) / dx
        t_delta_x = resolution / (dx if dx > 0 else -dx)
    else:
        t_max_x = t_delta_x = inf
    if dy > 1e-12 or dy < -1e-12:
        t_max_y = ((r + (1 if dy > 0 else 0)) * resolution - y0) / dy
        t_delta_y = resolution / (dy if dy > 0 else -dy)
    else:
        t_max_y = t_delta_y = inf
    row_first = step_r < 0
    while True:
        diff = t_max_x - t_max_y
        if -1e-12 < diff < 1e-12:
            if row_first:
                t = t_max_y
                r += step_r
                t_max_y += t_delta_y
            else:
                t = t_max_x
                c += step_c
                t_max_x += t_delta_x
        elif diff < 0:
            t = t_max_x
            c += step_c
            t_max_x += t_delta_x
        else:
            t = t_max_y
            r += step_r
            t_max_y += t_delta_y
        if t > max_t or r < 0 or r >= h or c < 0 or c >= w:
            return cells, None
        cells.append((r, c))
        if blocked is not None and blocked[r][c]:
            return cells, t


def segment_cells(x0: float, y0: float, x1: float, y1: float,
                  resolution: float, shape: tuple[int, int]) -> list[Cell]:
    """Cells crossed by the segment (x0, y0) -> (x1, y1), start cell included."""
    length = math.hypot(x1 - x0, y1 - y0)
    if length < 1e-12:
        cell = world_to_cell(x0, y0, resolution)
        return [cell] if in_bounds(cell, shape) else []
    dx, dy = (x1 - x0) / length, (y1 - y0) / length
    return ray_cells(x0, y0, dx, dy, length, resolution, shape)[0]


def segment_blocked(blocked: np.ndarray, x0: float, y0: float, x1: float, y1: float,
                    resolution: float, ignore: frozenset[Cell] | set[Cell] = frozenset()) -> bool:
    """True when the segment leaves the grid or crosses a blocked cell not in ``ignore``."""
    end = world_to_cell(x1, y1, resolution)
    if not in_bounds(end, blocked.shape):
        return True
    for cell in segment_cells(x0, y0, x1, y1, resolution, blocked.shape):
        if cell not in ignore and blocked[cell]:
            return True
    return False


def octile(a: Cell, b: Cell) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (dr + dc) + (SQRT2 - 2.0) * min(dr, dc)


def dijkstra_cells(passable: np.ndarray, sources: list[Cell]) -> np.ndarray:
    """Multi-source shortest distances in cell units (inf = unreachable).

    8-connected; diagonal moves need both orthogonal neighbours passable, so
    the path never squeezes between two blocked cells touching at a corner.
    """
    h, w = passable.shape
    flat = sorted({r * w + c for r, c in sources if in_bounds((r, c), (h, w)) and passable[r, c]})
    if not flat:
        return np.full((h, w), np.inf)
    graph = grid_graph(np.where(passable, 1.0, np.inf))
    d = dijkstra(graph, directed=True, indices=flat, min_only=True)
    return np.asarray(d).reshape(h, w)


@lru_cache(maxsize=8)
def _graph_layout(h: int, w: int):
    """Fixed 8-slot-per-cell CSR layout: neighbor index, the two corner cells a
    diagonal move must not cut (self for straight moves), step length, in-bounds flag."""
    r, c = np.divmod(np.arange(h * w), w)
    nbr, side_a, side_b, steps, ok = [], [], [], [], []
    for dr, dc, step in NEIGHBORS8:
        nr, nc = r + dr, c + dc
        inside = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
        nr, nc = np.clip(nr, 0, h - 1), np.clip(nc, 0, w - 1)
        nbr.append(nr * w + nc)
        side_a.append(nr * w + c if dr and dc else nr * w + nc)
        side_b.append(r * w + nc if dr and dc else nr * w + nc)
        steps.append(np.full(h * w, step))
        ok.append(inside)
    stack = lambda xs: np.stack(xs, axis=1).ravel()  # noqa: E731
    indptr = np.arange(0, 8 * h * w + 1, 8)
    return indptr, stack(nbr), stack(side_a), stack(side_b), stack(steps), stack(ok)


def grid_graph(cost: np.ndarray) -> csr_matrix:
    """Sparse 8-connected graph over cells with finite ``cost``.

    Moving between cells a and b costs step_length * (cost[a] + cost[b]) / 2.
    Same corner rule as :func:`dijkstra_cells`. Blocked moves carry infinite
    weight inside a fixed layout, which shortest-path searches never relax.
    """
    h, w = cost.shape
    indptr, nbr, side_a, side_b, steps, inside = _graph_layout(h, w)
    flat = cost.ravel().astype(float)
    src = np.repeat(flat, 8)
    with np.errstate(invalid="ignore"):
        weight = steps * 0.5 * (src + flat[nbr])
    blocked = ~inside | ~np.isfinite(weight) | ~np.isfinite(flat[side_a]) | ~np.isfinite(flat[side_b])
    weight[blocked] = np.inf
    return csr_matrix((weight, nbr, indptr), shape=(h * w, h * w))


def graph_distances(graph: csr_matrix, shape: tuple[int, int], sources: list[Cell],
                    predecessors: bool = False):
    """Distances (cell units) from each source to every cell; shape (len(sources), h, w).

    With ``predecessors=True`` also returns the flat predecessor index array
    (same leading shape, -9999 where undefined).
    """
    w = shape[1]
    flat = [r * w + c for r, c in sources]
    if predecessors:
        d, pred = dijkstra(graph, directed=True, indices=flat, return_predecessors=True)
        return np.asarray(d).reshape(len(sources), *shape), np.asarray(pred).reshape(len(sources), *shape)
    d = dijkstra(graph, directed=True, indices=flat)
    return np.asarray(d).reshape(len(sources), *shape)


def trace_predecessors(pred: np.ndarray, target: Cell) -> list[Cell]:
    """Cell path from the search source to ``target`` given a (h, w) predecessor map."""
    w = pred.shape[1]
    path = [target]
    cur = target
    while True:
        p = int(pred[cur])
        if p < 0:
            break
        cur = (p // w, p % w)
        path.append(cur)
    return path[::-1]
