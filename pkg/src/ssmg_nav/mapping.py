"""Occupancy grid, goal-conditioned value map and goal-agnostic object map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .goals import GoalSpec
from .grid import Cell, cell_center, ray_cells
from .knowledge import AffinityTable, FLOOR, default_table
from .sim_env import Detection, Observation, Pose, WorldMap, wrap_angle

UNKNOWN, FREE, OCCUPIED = 0, 1, 2
VIEW_CAPACITY = 3
IOU_GATE = 0.3


@dataclass
class OccupancyGrid:
    resolution: float
    labels: np.ndarray  # int8 (h, w) of UNKNOWN / FREE / OCCUPIED
    free_ev: np.ndarray
    occ_ev: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int, resolution: float) -> "OccupancyGrid":
        shape = (height, width)
        return cls(resolution, np.zeros(shape, np.int8), np.zeros(shape, np.int32),
                   np.zeros(shape, np.int32))

    @classmethod
    def like(cls, world: WorldMap) -> "OccupancyGrid":
        return cls.empty(world.height, world.width, world.resolution)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def free(self) -> np.ndarray:
        return self.labels == FREE

    @property
    def occupied(self) -> np.ndarray:
        return self.labels == OCCUPIED

    @property
    def unknown(self) -> np.ndarray:
        return self.labels == UNKNOWN

    def known_count(self) -> int:
        return int(np.count_nonzero(self.labels != UNKNOWN))

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.labels.copy(), self.free_ev.copy(),
                             self.occ_ev.copy())


def scan_cells(obs: Observation, resolution: float, shape: tuple[int, int]) -> tuple[set[Cell], set[Cell]]:
    """Cells seen free and cells seen occupied by one observation's valid rays."""
    pose, scan = obs.pose, obs.scan
    free: set[Cell] = set()
    occ: set[Cell] = set()
    for off, rng, hit, ok in zip(scan.angles, scan.ranges, scan.hits, scan.valid):
        if not ok:
            continue
        a = pose.heading + off
        cells, _ = ray_cells(pose.x, pose.y, math.cos(a), math.sin(a), rng + 1e-9,
                             resolution, shape)
        if hit and cells:
            occ.add(cells[-1])
            cells = cells[:-1]
        free.update(cells)
    free -= occ
    return free, occ


def update_occupancy(grid: OccupancyGrid, obs: Observation,
                     cells: tuple[set[Cell], set[Cell]] | None = None) -> OccupancyGrid:
    """Accumulate free/occupied evidence from ``obs`` and relabel touched cells by majority."""
    free, occ = cells if cells is not None else scan_cells(obs, grid.resolution, grid.shape)
    free = set(free)
    here = obs.pose.cell(grid.resolution)
    free.add(here)
    touched = free | occ
    for c in free:
        grid.free_ev[c] += 1
    for c in occ:
        grid.occ_ev[c] += 1
    if obs.bump_cell is not None:
        c = obs.bump_cell
        grid.occ_ev[c] = max(grid.occ_ev[c], grid.free_ev[c]) + 1
        touched.add(c)
    for c in touched:
        f, o = grid.free_ev[c], grid.occ_ev[c]
        if f > o:
            grid.labels[c] = FREE
        elif o > f:
            grid.labels[c] = OCCUPIED
    return grid


# ----------------------------------------------------------------------------- value map

@dataclass
class ValueMap:
    value: np.ndarray
    confidence: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int) -> "ValueMap":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def copy(self) -> "ValueMap":
        return ValueMap(self.value.copy(), self.confidence.copy())


class RelevanceProvider(Protocol):
    def relevance(self, detections: tuple[Detection, ...], goal: GoalSpec) -> float: ...


class CaptionSource(Protocol):
    def caption(self, instance_id: str) -> tuple[tuple[str, ...], str]: ...


class WorldCaptions:
    """Caption surrogate: ground-truth caption tokens and room label of a detected instance."""

    def __init__(self, world: WorldMap):
        self._by_id = {o.instance_id: (o.caption_tokens, o.room_label) for o in world.objects}

    def caption(self, instance_id: str) -> tuple[tuple[str, ...], str]:
        return self._by_id.get(instance_id, ((), ""))


class CooccurrenceRelevance:
    def __init__(self, captions: CaptionSource, table: AffinityTable | None = None):
        self.captions = captions
        self.table = table or default_table()

    def relevance(self, detections: tuple[Detection, ...], goal: GoalSpec) -> float:
        best = FLOOR
        for det in detections:
            tokens, room = self.captions.caption(det.instance_id)
            s = self.table.object_score(det.category, room, frozenset(tokens), goal, det.instance_id)
            best = max(best, s)
        return min(1.0, best)


def relevance_score(obs: Observation, goal: GoalSpec, provider: RelevanceProvider) -> float:
    return float(min(1.0, max(0.0, provider.relevance(obs.detections, goal))))


def update_value_map(vmap: ValueMap, obs: Observation, score: float, resolution: float,
                     cells: set[Cell] | None = None) -> ValueMap:
    """Fuse ``score`` into every cell seen free by ``obs``, weighted by angular confidence."""
    if cells is None:
        cells, _ = scan_cells(obs, resolution, vmap.value.shape)
    if not cells:
        return vmap
    idx = np.array(sorted(cells))
    rows, cols = idx[:, 0], idx[:, 1]
    pose = obs.pose
    cx = (cols + 0.5) * resolution - pose.x
    cy = (rows + 0.5) * resolution - pose.y
    theta = np.arctan2(cy, cx) - pose.heading
    theta = (theta + np.pi) % (2 * np.pi) - np.pi
    theta = np.where(np.hypot(cx, cy) < 1e-9, 0.0, theta)
    half = obs.scan.fov / 2.0
    new_c = np.cos(np.clip(theta / half, -1.0, 1.0) * np.pi / 2.0) ** 2
    new_c = np.where(new_c < 1e-12, 0.0, new_c)
    old_v, old_c = vmap.value[rows, cols], vmap.confidence[rows, cols]
    total = old_c + new_c
    safe = np.where(total > 0, total, 1.0)
    fused_v = np.where(total > 0, (old_c * old_v + new_c * score) / safe, old_v)
    fused_c = np.where(total > 0, (old_c ** 2 + new_c ** 2) / safe, old_c)
    vmap.value[rows, cols] = np.clip(fused_v, 0.0, 1.0)
    vmap.confidence[rows, cols] = np.clip(fused_c, 0.0, 1.0)
    return vmap


# ----------------------------------------------------------------------------- object map

@dataclass(frozen=True)
class View:
    pose: Pose
    caption: str
    score: float


@dataclass
class ObjectRecord:
    instance_id: str
    category: str
    footprint: frozenset[Cell]
    centroid: tuple[float, float]
    views: list[View] = field(default_factory=list)
    room: str = ""
    tokens: frozenset[str] = frozenset()

    @property
    def best_view(self) -> View:
        return self.views[0]

    def add_view(self, view: View, capacity: int = VIEW_CAPACITY) -> None:
        self.views.append(view)
        self.views.sort(key=lambda v: -v.score)  # stable: earlier view wins ties
        del self.views[capacity:]


@dataclass
class ObjectMap:
    records: dict[str, ObjectRecord] = field(default_factory=dict)
    version: int = 0
    touched: set[str] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.records)

    def copy(self) -> "ObjectMap":
        recs = {k: ObjectRecord(r.instance_id, r.category, r.footprint, r.centroid, list(r.views),
                                r.room, r.tokens) for k, r in self.records.items()}
        return ObjectMap(recs, self.version, set(self.touched))


def _bbox(cells: frozenset[Cell]) -> tuple[int, int, int, int]:
    rs = [c[0] for c in cells]
    cs = [c[1] for c in cells]
    return min(rs), min(cs), max(rs), max(cs)


def bbox_iou(a: frozenset[Cell], b: frozenset[Cell]) -> float:
    ar0, ac0, ar1, ac1 = _bbox(a)
    br0, bc0, br1, bc1 = _bbox(b)
    ih = min(ar1, br1) - max(ar0, br0) + 1
    iw = min(ac1, bc1) - max(ac0, bc0) + 1
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    area_a = (ar1 - ar0 + 1) * (ac1 - ac0 + 1)
    area_b = (br1 - br0 + 1) * (bc1 - bc0 + 1)
    return inter / (area_a + area_b - inter)


def _footprint_centroid(cells: frozenset[Cell], resolution: float) -> tuple[float, float]:
    pts = [cell_center(c, resolution) for c in sorted(cells)]
    return (sum(p[0] for p in pts) / len(pts), sum(p[1] for p in pts) / len(pts))


def detection_position(pose: Pose, det: Detection) -> tuple[float, float]:
    a = pose.heading + det.bearing
    return pose.x + det.range * math.cos(a), pose.y + det.range * math.sin(a)


def update_object_map(omap: ObjectMap, obs: Observation, captions: CaptionSource,
                      resolution: float) -> ObjectMap:
    """Fuse detections into records gated by category and footprint box IoU."""
    omap.touched = set()
    for det in obs.detections:
        tokens, room = captions.caption(det.instance_id)
        view = View(obs.pose, " ".join(tokens), det.score)
        match, best_iou = None, 0.0
        for rid in sorted(omap.records):
            rec = omap.records[rid]
            if rec.category != det.category:
                continue
            iou = bbox_iou(rec.footprint, det.footprint)
            if iou >= IOU_GATE and iou > best_iou:
                match, best_iou = rec, iou
        if match is None:
            rid = det.instance_id
            while rid in omap.records:
                rid += "'"
            rec = ObjectRecord(rid, det.category, det.footprint,
                               detection_position(obs.pose, det), [view], room,
                               frozenset(tokens))
            omap.records[rid] = rec
            omap.version += 1
            omap.touched.add(rid)
            continue
        before = match.best_view
        match.add_view(view)
        if match.footprint != det.footprint:
            match.footprint = match.footprint | det.footprint
            match.centroid = _footprint_centroid(match.footprint, resolution)
        match.tokens = match.tokens | frozenset(tokens)
        if match.best_view is not before:
            omap.version += 1
        omap.touched.add(match.instance_id)
    return omap
