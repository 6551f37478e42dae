"""Skeleton topology of known free space.

Zhang-Suen two-subiteration thinning, with every parallel deletion re-checked
sequentially against a simple-point table so that thinning never splits or
erases a component (plain Zhang-Suen deletes 2x2 squares outright). Cleanup
sweeps then run to a common fixpoint: staircase corners (spurious degree-3
pixels) are removed, one-pixel spurs are pruned, and the 2x2 cores left by
diagonal crossings are rerouted.

In the graph, each 8-connected cluster of junction pixels becomes a single
Junction node; the non-representative pixels are kept in ``members``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import SQRT2, Cell
from .mapping import FREE, UNKNOWN, OccupancyGrid


class EmptyFreeSpace(ValueError):
    pass


class NodeKind(str, enum.Enum):
    ENDPOINT = "endpoint"
    JUNCTION = "junction"


NONE, ENDPOINT_PX, CONNECTOR_PX, JUNCTION_PX = 0, 1, 2, 3

# neighbour order P2..P9: N, NE, E, SE, S, SW, W, NW
_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _components(positions: list[tuple[int, int]], four: bool) -> list[set[tuple[int, int]]]:
    left = set(positions)
    comps = []
    while left:
        seed = left.pop()
        comp, stack = {seed}, [seed]
        while stack:
            r, c = stack.pop()
            for q in list(left):
                dr, dc = abs(q[0] - r), abs(q[1] - c)
                if (dr + dc == 1) if four else max(dr, dc) == 1:
                    left.discard(q)
                    comp.add(q)
                    stack.append(q)
        comps.append(comp)
    return comps


def _build_simple_table() -> np.ndarray:
    table = np.zeros(256, dtype=bool)
    for code in range(256):
        fg = [_RING[i] for i in range(8) if code >> i & 1]
        bg = [_RING[i] for i in range(8) if not code >> i & 1]
        if len(_components(fg, four=False)) != 1:
            continue
        touching = [comp for comp in _components(bg, four=True)
                    if any(abs(r) + abs(c) == 1 for r, c in comp)]
        table[code] = len(touching) == 1
    return table


SIMPLE = _build_simple_table()


def _code(img: np.ndarray, r: int, c: int) -> int:
    code = 0
    for i, (dr, dc) in enumerate(_RING):
        if img[r + dr, c + dc]:
            code |= 1 << i
    return code


def free_mask(grid: OccupancyGrid | np.ndarray) -> np.ndarray:
    """Free cells to thin; unknown pinholes with four free neighbours count as free."""
    if isinstance(grid, np.ndarray):
        return grid.astype(bool)
    free = grid.labels == FREE
    unknown = grid.labels == UNKNOWN
    p = np.pad(free, 1)
    four = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return free | (unknown & four)


def thin(grid: OccupancyGrid | np.ndarray) -> np.ndarray:
    """One-pixel-wide skeleton of the free mask (bool array, same shape)."""
    mask = free_mask(grid)
    if not mask.any():
        raise EmptyFreeSpace("no free cell to thin")
    img = np.pad(mask, 1).astype(np.uint8)
    allowed = np.pad(mask, 1)
    while _zs_pass(img, 0) + _zs_pass(img, 1):
        pass
    while _remove_corners(img) | _prune_spurs(img) | _repair_blocks(img, allowed):
        pass
    return img[1:-1, 1:-1].astype(bool)


def _zs_pass(img: np.ndarray, sub: int) -> int:
    p = [img[1 + dr:img.shape[0] - 1 + dr, 1 + dc:img.shape[1] - 1 + dc] for dr, dc in _RING]
    p2, p3, p4, p5, p6, p7, p8, p9 = p
    core = img[1:-1, 1:-1]
    b = sum(x.astype(np.int16) for x in p)
    seq = p + [p2]
    a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int16) for i in range(8))
    if sub == 0:
        cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
    else:
        cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
    cand = (core == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
    removed = 0
    for r, c in zip(*np.nonzero(cand)):
        r, c = r + 1, c + 1
        code = _code(img, r, c)
        if bin(code).count("1") >= 2 and SIMPLE[code]:
            img[r, c] = 0
            removed += 1
    return removed


def _remove_corners(img: np.ndarray) -> bool:
    """Delete remaining simple non-tip pixels (staircase corners)."""
    any_change, changed = False, True
    while changed:
        changed = False
        for r, c in zip(*np.nonzero(img)):
            code = _code(img, r, c)
            if bin(code).count("1") >= 2 and SIMPLE[code]:
                img[r, c] = 0
                changed = any_change = True
    return any_change


def _prune_spurs(img: np.ndarray) -> bool:
    """Delete one-pixel spurs: tips whose only neighbour is a junction pixel."""
    changed = False
    for r, c in zip(*np.nonzero(img)):
        code = _code(img, r, c)
        if bin(code).count("1") != 1:
            continue
        i = code.bit_length() - 1
        nr, nc = r + _RING[i][0], c + _RING[i][1]
        if bin(_code(img, nr, nc)).count("1") >= 3:
            img[r, c] = 0
            changed = True
    return changed


_S8 = np.ones((3, 3), dtype=bool)


def _topology(img: np.ndarray) -> tuple[np.ndarray, int, int]:
    labels, n_fg = ndimage.label(img, _S8)
    _, n_bg = ndimage.label(img == 0)
    return labels, n_fg, n_bg


def _repair_blocks(img: np.ndarray, allowed: np.ndarray) -> bool:
    """Break surviving 2x2 blocks (diagonal crossings) with a local reroute.

    Such a block has no simple pixel, so instead one or two block pixels are
    removed and up to two allowed cells of the surrounding 4x4 window are
    added. The first edit (fewest changes, then raster order) that keeps the
    component partition and hole count and leaves no 2x2 block is applied.
    """
    changed = False
    while True:
        blocks = img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]
        spots = np.argwhere(blocks)
        if not len(spots):
            return changed
        fixed = False
        for r, c in spots:
            if _repair_one(img, allowed, int(r), int(c)):
                fixed = changed = True
                break
        if not fixed:
            return changed


def _repair_one(img: np.ndarray, allowed: np.ndarray, r: int, c: int) -> bool:
    h, w = img.shape
    block = [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
    window = [(i, j) for i in range(r - 1, r + 3) for j in range(c - 1, c + 3)
              if 0 < i < h - 1 and 0 < j < w - 1 and allowed[i, j] and not img[i, j]]
    removals = [(p,) for p in block] + list(itertools.combinations(block, 2))
    additions = [()] + [(p,) for p in window] + list(itertools.combinations(window, 2))
    labels, n_fg, n_bg = _topology(img)
    edits = sorted(((rm, ad) for rm in removals for ad in additions),
                   key=lambda e: (len(e[0]) + len(e[1]), e))
    for rm, ad in edits:
        trial = img.copy()
        for p in rm:
            trial[p] = 0
        for p in ad:
            trial[p] = 1
        sub = trial[max(r - 2, 0):r + 4, max(c - 2, 0):c + 4]
        if (sub[:-1, :-1] & sub[1:, :-1] & sub[:-1, 1:] & sub[1:, 1:]).any():
            continue
        new_labels, m_fg, m_bg = _topology(trial)
        if m_fg != n_fg or m_bg != n_bg:
            continue
        kept = (img == 1) & (trial == 1)
        pairs = set(zip(labels[kept].tolist(), new_labels[kept].tolist()))
        if len(pairs) != n_fg or len({b for _, b in pairs}) != n_fg:
            continue
        img[:] = trial
        return True
    return False


def degree(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask.astype(np.int16), 1)
    h, w = mask.shape
    deg = sum(p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] for dr, dc in _RING)
    return np.where(mask, deg, 0)


def classify_pixels(mask: np.ndarray) -> np.ndarray:
    """Per-pixel kind: ENDPOINT_PX (degree <= 1), CONNECTOR_PX (2), JUNCTION_PX (>= 3)."""
    deg = degree(mask)
    kinds = np.zeros(mask.shape, np.int8)
    kinds[mask & (deg <= 1)] = ENDPOINT_PX
    kinds[mask & (deg == 2)] = CONNECTOR_PX
    kinds[mask & (deg >= 3)] = JUNCTION_PX
    return kinds


@dataclass(frozen=True)
class SkelNode:
    node_id: int
    kind: NodeKind
    cell: Cell
    members: tuple[Cell, ...] = ()  # absorbed junction-cluster pixels, cell excluded


@dataclass(frozen=True)
class SkelEdge:
    a: int
    b: int
    chain: tuple[Cell, ...]  # connector pixels strictly between the two nodes
    length: float  # meters


@dataclass
class SkeletonGraph:
    nodes: list[SkelNode]
    edges: list[SkelEdge]
    resolution: float = 1.0
    _index: dict[int, SkelNode] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._index = {n.node_id: n for n in self.nodes}

    def node(self, node_id: int) -> SkelNode:
        return self._index[node_id]

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._index

    def neighbors(self, node_id: int) -> list[int]:
        out = set()
        for e in self.edges:
            if e.a == node_id:
                out.add(e.b)
            if e.b == node_id:
                out.add(e.a)
        out.discard(node_id)
        return sorted(out)

    def of_kind(self, kind: NodeKind) -> list[SkelNode]:
        return [n for n in self.nodes if n.kind is kind]

    def pixels(self) -> set[Cell]:
        out: set[Cell] = set()
        for n in self.nodes:
            out.add(n.cell)
            out.update(n.members)
        for e in self.edges:
            out.update(e.chain)
        return out

    def relabel(self, mapping: dict[int, int]) -> "SkeletonGraph":
        nodes = [SkelNode(mapping[n.node_id], n.kind, n.cell, n.members) for n in self.nodes]
        edges = [SkelEdge(mapping[e.a], mapping[e.b], e.chain, e.length) for e in self.edges]
        nodes.sort(key=lambda n: n.node_id)
        return SkeletonGraph(nodes, edges, self.resolution)


def _step(a: Cell, b: Cell) -> float:
    return SQRT2 if a[0] != b[0] and a[1] != b[1] else 1.0


def _nbrs(pixels: set[Cell], p: Cell) -> list[Cell]:
    r, c = p
    return sorted((r + dr, c + dc) for dr, dc in _RING if (r + dr, c + dc) in pixels)


def _junction_clusters(junctions: list[Cell], deg: np.ndarray) -> list[list[Cell]]:
    left = set(junctions)
    clusters = []
    for seed in junctions:
        if seed not in left:
            continue
        left.discard(seed)
        comp, stack = [seed], [seed]
        while stack:
            p = stack.pop()
            for q in _nbrs(left, p):
                left.discard(q)
                comp.append(q)
                stack.append(q)
        cr = sum(p[0] for p in comp) / len(comp)
        cc = sum(p[1] for p in comp) / len(comp)
        comp.sort(key=lambda p: (-deg[p], (p[0] - cr) ** 2 + (p[1] - cc) ** 2, p))
        clusters.append(comp)
    return clusters


def extract_graph(mask: np.ndarray, resolution: float = 1.0) -> SkeletonGraph:
    """Reduce a skeleton mask to endpoint/junction nodes joined by connector-chain edges."""
    mask = mask.astype(bool)
    kinds = classify_pixels(mask)
    deg = degree(mask)
    pixels = {(int(r), int(c)) for r, c in zip(*np.nonzero(mask))}
    ends = sorted((int(r), int(c)) for r, c in zip(*np.nonzero(kinds == ENDPOINT_PX)))
    juncs = sorted((int(r), int(c)) for r, c in zip(*np.nonzero(kinds == JUNCTION_PX)))

    owner: dict[Cell, int] = {}
    nodes: list[SkelNode] = []
    groups = [[p] for p in ends] + _junction_clusters(juncs, deg)
    groups.sort(key=lambda g: g[0])
    for g in groups:
        nid = len(nodes)
        kind = NodeKind.JUNCTION if kinds[g[0]] == JUNCTION_PX else NodeKind.ENDPOINT
        nodes.append(SkelNode(nid, kind, g[0], tuple(sorted(g[1:]))))
        for p in g:
            owner[p] = nid

    visited: set[Cell] = set()
    edges: list[SkelEdge] = []
    direct: set[tuple[int, int]] = set()

    def walk(start: Cell, first: Cell, stop) -> tuple[Cell, list[Cell], float]:
        chain: list[Cell] = []
        prev, cur = start, first
        length = _step(start, first)
        while not stop(cur):
            chain.append(cur)
            visited.add(cur)
            nxt = [q for q in _nbrs(pixels, cur) if q != prev]
            if not nxt:
                break
            length += _step(cur, nxt[0])
            prev, cur = cur, nxt[0]
        return cur, chain, length

    for s in sorted(owner):
        a = owner[s]
        for n in _nbrs(pixels, s):
            if n in owner:
                b = owner[n]
                key = (min(a, b), max(a, b))
                if a != b and key not in direct:
                    direct.add(key)
                    edges.append(SkelEdge(key[0], key[1], (), _step(s, n) * resolution))
            elif n not in visited:
                end, chain, length = walk(s, n, lambda q: q in owner)
                edges.append(SkelEdge(a, owner.get(end, a), tuple(chain), length * resolution))

    # pure loops have no special pixel: anchor a synthetic junction at the top-left pixel
    for p in sorted(pixels - set(owner) - visited):
        if p in visited:
            continue
        nid = len(nodes)
        nodes.append(SkelNode(nid, NodeKind.JUNCTION, p))
        owner[p] = nid
        visited.add(p)
        _, chain, length = walk(p, _nbrs(pixels, p)[0], lambda q: q == p)
        edges.append(SkelEdge(nid, nid, tuple(chain), length * resolution))
    return SkeletonGraph(nodes, edges, resolution)


def skeleton_graph(grid: OccupancyGrid) -> SkeletonGraph:
    return extract_graph(thin(grid), grid.resolution)


def match_node_ids(prev: SkeletonGraph | None, new: SkeletonGraph, next_id: int,
                   max_cells: float = 3.0) -> tuple[SkeletonGraph, int]:
    """Carry node ids over from ``prev`` to nearby nodes (<= max_cells) of ``new``.

    Pairs are matched greedily by increasing distance, one-to-one; unmatched
    new nodes get fresh ids starting at ``next_id``.
    """
    mapping: dict[int, int] = {}
    if prev is not None and prev.nodes:
        pairs = []
        for n in new.nodes:
            for o in prev.nodes:
                d = math.hypot(n.cell[0] - o.cell[0], n.cell[1] - o.cell[1])
                if d <= max_cells:
                    pairs.append((d, n.node_id, o.node_id))
        pairs.sort()
        used_old: set[int] = set()
        for _, nid, oid in pairs:
            if nid in mapping or oid in used_old:
                continue
            mapping[nid] = oid
            used_old.add(oid)
    for n in new.nodes:
        if n.node_id not in mapping:
            mapping[n.node_id] = next_id
            next_id += 1
    return new.relabel(mapping), next_id
