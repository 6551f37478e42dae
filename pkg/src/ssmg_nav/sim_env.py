"""Deterministic 2D grid world: scenarios, kinematics, depth raycasting, detections.

Frame conventions: cell (row, col) covers x in [col*res, (col+1)*res) and
y in [row*res, (row+1)*res). Headings are radians measured from +x toward +y;
TurnLeft increases the heading.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .goals import GoalSpec, Modality, tokenize
from .grid import (Cell, cell_center, dijkstra_cells, in_bounds, ray_cells, segment_blocked,
                   traverse, world_to_cell)

FORWARD_STEP_M = 0.25
TURN_RAD = math.radians(30.0)
MIN_RANGE_M = 0.5
MAX_RANGE_M = 5.0
FOV_RAD = math.radians(79.0)
N_RAYS = 41
SCORE_FLOOR = 0.05
TWO_PI = 2.0 * math.pi


class ParseError(ValueError):
    """Scenario file could not be parsed; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ValidationError(ValueError):
    """Scenario parsed but violates a world invariant; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class Action(str, enum.Enum):
    FORWARD = "forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    STOP = "stop"


@dataclass(frozen=True)
class GroundTruthObject:
    instance_id: str
    category: str
    centroid: tuple[float, float]
    footprint: frozenset[Cell]
    caption_tokens: tuple[str, ...]
    room_label: str


@dataclass
class WorldMap:
    resolution: float
    occupied: np.ndarray  # bool (height, width); True = OccupiedGT
    objects: list[GroundTruthObject] = field(default_factory=list)
    name: str = "world"

    @property
    def height(self) -> int:
        return int(self.occupied.shape[0])

    @property
    def width(self) -> int:
        return int(self.occupied.shape[1])

    @property
    def free(self) -> np.ndarray:
        return ~self.occupied

    def occupied_rows(self) -> list[list[bool]]:
        """Nested-list copy of ``occupied`` for fast scalar lookups (cached)."""
        cached = self.__dict__.get("_rows")
        if cached is None or cached[0] is not self.occupied:
            cached = (self.occupied, self.occupied.tolist())
            self.__dict__["_rows"] = cached
        return cached[1]

    def object(self, instance_id: str) -> GroundTruthObject:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(instance_id)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.width * self.resolution and 0.0 <= y < self.height * self.resolution


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def cell(self, resolution: float) -> Cell:
        return world_to_cell(self.x, self.y, resolution)


@dataclass(frozen=True)
class SensorConfig:
    fov: float = FOV_RAD
    n_rays: int = N_RAYS
    max_range: float = MAX_RANGE_M
    min_range: float = MIN_RANGE_M


DEFAULT_SENSOR = SensorConfig()


@dataclass(frozen=True)
class DepthScan:
    """Per-ray angle offsets, ranges and flags.

    ``valid`` is False for returns nearer than the minimum sensing range;
    such rays carry hit=False, range=max_range and are ignored by mapping.
    """

    angles: tuple[float, ...]
    ranges: tuple[float, ...]
    hits: tuple[bool, ...]
    valid: tuple[bool, ...]
    fov: float
    max_range: float

    def __len__(self) -> int:
        return len(self.angles)


@dataclass(frozen=True)
class Detection:
    instance_id: str
    category: str
    score: float
    bearing: float
    range: float
    footprint: frozenset[Cell]


@dataclass(frozen=True)
class Observation:
    pose: Pose
    scan: DepthScan
    detections: tuple[Detection, ...]
    step_index: int = 0
    collision: bool = False
    bump_cell: Cell | None = None


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


def _normalize_heading(h: float) -> float:
    h = h % TWO_PI
    k = round(h / TURN_RAD)
    if abs(h - k * TURN_RAD) < 1e-9:
        h = (k % 12) * TURN_RAD
    return h


# ----------------------------------------------------------------------------- scenarios

def _require(data: dict, key: str, kind, where: str):
    if key not in data:
        raise ParseError(f"{where}{key}", "missing")
    value = data[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ParseError(f"{where}{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def parse_scenario(data: dict) -> tuple[WorldMap, Pose, list[GoalSpec]]:
    """Build and validate a scenario from its decoded JSON document."""
    if not isinstance(data, dict):
        raise ParseError("<root>", "expected an object")
    res = float(_require(data, "resolution_m", (int, float), ""))
    rows = _require(data, "grid", list, "")
    if not rows or not all(isinstance(r, str) for r in rows):
        raise ParseError("grid", "expected a non-empty list of row strings")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"grid[{i}]", f"row length {len(row)} != {width}")
        bad = set(row) - {".", "#"}
        if bad:
            raise ParseError(f"grid[{i}]", f"unexpected characters {sorted(bad)}")
    occ = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)

    if res <= 0:
        raise ValidationError("resolution_m", "must be > 0")
    if occ.shape[0] < 8 or occ.shape[1] < 8:
        raise ValidationError("grid", f"world {occ.shape[1]}x{occ.shape[0]} smaller than 8x8")

    start = _require(data, "start", dict, "")
    sx = float(_require(start, "x", (int, float), "start."))
    sy = float(_require(start, "y", (int, float), "start."))
    sh = math.radians(float(start.get("heading_deg", 0.0)))

    objects: list[GroundTruthObject] = []
    seen: set[str] = set()
    for i, od in enumerate(_require(data, "objects", list, "")):
        where = f"objects[{i}]."
        if not isinstance(od, dict):
            raise ParseError(f"objects[{i}]", "expected an object")
        oid = _require(od, "id", str, where)
        cat = _require(od, "category", str, where)
        ox = float(_require(od, "x", (int, float), where))
        oy = float(_require(od, "y", (int, float), where))
        caps = _require(od, "captions", list, where)
        room = _require(od, "room", str, where)
        if "footprint" in od:
            fp_raw = od["footprint"]
            if not isinstance(fp_raw, list) or not all(
                    isinstance(p, list) and len(p) == 2 and all(isinstance(v, int) for v in p)
                    for p in fp_raw):
                raise ParseError(f"{where}footprint", "expected a list of [row, col] pairs")
            footprint = frozenset((int(r), int(c)) for r, c in fp_raw)
        else:
            footprint = frozenset([world_to_cell(ox, oy, res)])
        if oid in seen:
            raise ValidationError(f"{where}id", f"duplicate instance id {oid!r}")
        seen.add(oid)
        tokens = tokenize(caps)
        if not tokens:
            raise ValidationError(f"{where}captions", "must be non-empty")
        for cell in footprint:
            if not in_bounds(cell, occ.shape):
                raise ValidationError(f"{where}footprint", f"cell {cell} outside the grid")
            if occ[cell] and not _touches_free(occ, cell):
                raise ValidationError(f"{where}footprint", f"cell {cell} not adjacent to free space")
        if not (0 <= ox < occ.shape[1] * res and 0 <= oy < occ.shape[0] * res):
            raise ValidationError(f"{where}x", "centroid outside the world")
        objects.append(GroundTruthObject(oid, cat.lower(), (ox, oy), footprint, tokens, room.lower()))

    world = WorldMap(res, occ, objects, name=str(data.get("name", "world")))
    if not world.contains(sx, sy):
        raise ValidationError("start", "outside the world")
    if occ[world_to_cell(sx, sy, res)]:
        raise ValidationError("start", "start cell is occupied")
    pose = Pose(sx, sy, _normalize_heading(sh))

    goals: list[GoalSpec] = []
    for i, sd in enumerate(_require(data, "subtasks", list, "")):
        where = f"subtasks[{i}]."
        if not isinstance(sd, dict):
            raise ParseError(f"subtasks[{i}]", "expected an object")
        try:
            modality = Modality(_require(sd, "modality", str, where))
        except ValueError:
            raise ParseError(f"{where}modality", f"unknown modality {sd['modality']!r}") from None
        if "payload" not in sd:
            raise ParseError(f"{where}payload", "missing")
        goals.append(_goal_from(world, modality, sd, where))
    return world, pose, goals


def _goal_from(world: WorldMap, modality: Modality, sd: dict, where: str) -> GoalSpec:
    payload = sd["payload"]
    ids = {o.instance_id for o in world.objects}
    if modality is Modality.CATEGORY:
        if not isinstance(payload, str) or not payload:
            raise ParseError(f"{where}payload", "expected a category string")
        cat = payload.lower()
        targets = tuple(o.instance_id for o in world.objects if o.category == cat)
        if not targets:
            raise ValidationError(f"{where}payload", f"no object of category {cat!r}")
        return GoalSpec(modality, cat, None, targets)
    if modality is Modality.DESCRIPTION:
        if not isinstance(payload, (str, list)):
            raise ParseError(f"{where}payload", "expected a string or token list")
        tokens = tokenize(payload)
        if not tokens:
            raise ValidationError(f"{where}payload", "empty description")
        target = sd.get("target")
        if not isinstance(target, str):
            raise ParseError(f"{where}target", "description goals need a target instance id")
        if target not in ids:
            raise ValidationError(f"{where}target", f"unknown instance {target!r}")
        return GoalSpec(modality, tokens, None, (target,))
    if not isinstance(payload, str):
        raise ParseError(f"{where}payload", "expected an instance id")
    if payload not in ids:
        raise ValidationError(f"{where}payload", f"unknown instance {payload!r}")
    return GoalSpec(modality, payload, world.object(payload).category, (payload,))


def _touches_free(occ: np.ndarray, cell: Cell) -> bool:
    r, c = cell
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            n = (r + dr, c + dc)
            if (dr or dc) and in_bounds(n, occ.shape) and not occ[n]:
                return True
    return False


def load_scenario(path: str | Path) -> tuple[WorldMap, Pose, list[GoalSpec]]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError("<file>", f"invalid JSON at offset {exc.pos}: {exc.msg}") from None
    world, pose, goals = parse_scenario(data)
    if world.name == "world":
        world.name = path.stem
    return world, pose, goals


# ----------------------------------------------------------------------------- sensing

def raycast_scan(world: WorldMap, pose: Pose, fov: float = FOV_RAD, n_rays: int = N_RAYS,
                 max_range: float = MAX_RANGE_M, min_range: float = MIN_RANGE_M,
                 trace: list | None = None) -> DepthScan:
    """Depth scan. If ``trace`` is given, the crossed cells of each valid ray (the hit
    cell last) are appended to it, None for invalid rays."""
    if n_rays < 2:
        raise ValueError("n_rays must be >= 2")
    if not 0.0 < fov <= TWO_PI:
        raise ValueError("fov must lie in (0, 2pi]")
    offsets = np.linspace(-fov / 2.0, fov / 2.0, n_rays)
    occ = world.occupied
    rows = world.occupied_rows()
    res = world.resolution
    ranges, hits, valid = [], [], []
    for off in offsets:
        a = pose.heading + off
        cells, t = ray_cells(pose.x, pose.y, math.cos(a), math.sin(a), max_range, res, occ.shape,
                             rows)
        rng, hit = (max_range, False) if t is None else (t, True)
        if hit and rng < min_range:
            ranges.append(max_range)
            hits.append(False)
            valid.append(False)
            if trace is not None:
                trace.append(None)
        else:
            if trace is not None:
                trace.append(cells)
            ranges.append(float(rng))
            hits.append(hit)
            valid.append(True)
    return DepthScan(tuple(float(o) for o in offsets), tuple(ranges), tuple(hits), tuple(valid),
                     fov, max_range)


def detect_visible(world: WorldMap, pose: Pose, scan: DepthScan,
                   min_range: float = MIN_RANGE_M) -> tuple[Detection, ...]:
    out = []
    for obj in world.objects:
        dx, dy = obj.centroid[0] - pose.x, obj.centroid[1] - pose.y
        rng = math.hypot(dx, dy)
        if rng < min_range or rng > scan.max_range:
            continue
        bearing = wrap_angle(math.atan2(dy, dx) - pose.heading)
        if abs(bearing) > scan.fov / 2.0:
            continue
        if segment_blocked(world.occupied, pose.x, pose.y, obj.centroid[0], obj.centroid[1],
                           world.resolution, ignore=obj.footprint):
            continue
        score = min(1.0, max(SCORE_FLOOR, 1.0 - rng / scan.max_range))
        out.append(Detection(obj.instance_id, obj.category, score, bearing, rng, obj.footprint))
    return tuple(out)


def observe(world: WorldMap, pose: Pose, step_index: int = 0, sensor: SensorConfig = DEFAULT_SENSOR,
            collision: bool = False, bump_cell: Cell | None = None) -> Observation:
    scan = raycast_scan(world, pose, sensor.fov, sensor.n_rays, sensor.max_range, sensor.min_range)
    dets = detect_visible(world, pose, scan, sensor.min_range)
    return Observation(pose, scan, dets, step_index, collision, bump_cell)


def step(world: WorldMap, pose: Pose, action: Action, step_index: int = 0,
         sensor: SensorConfig = DEFAULT_SENSOR, observer=None) -> tuple[Pose, Observation]:
    """Apply one action. ``observer(pose, step_index, collision, bump_cell)`` may replace
    the default sensing (e.g. a memoizing wrapper); it must behave like :func:`observe`."""
    action = Action(action)
    collision, bump = False, None
    if action is Action.FORWARD:
        nx = pose.x + FORWARD_STEP_M * math.cos(pose.heading)
        ny = pose.y + FORWARD_STEP_M * math.sin(pose.heading)
        bump = _first_blocked(world, pose.x, pose.y, nx, ny)
        if bump is None and world.contains(nx, ny):
            new = Pose(nx, ny, pose.heading)
        else:
            new, collision = pose, True
    elif action is Action.TURN_LEFT:
        new = Pose(pose.x, pose.y, _normalize_heading(pose.heading + TURN_RAD))
    elif action is Action.TURN_RIGHT:
        new = Pose(pose.x, pose.y, _normalize_heading(pose.heading - TURN_RAD))
    else:
        new = pose
    if observer is not None:
        return new, observer(new, step_index, collision, bump)
    return new, observe(world, new, step_index, sensor, collision, bump)


def _first_blocked(world: WorldMap, x0: float, y0: float, x1: float, y1: float) -> Cell | None:
    length = math.hypot(x1 - x0, y1 - y0)
    dx, dy = (x1 - x0) / length, (y1 - y0) / length
    for cell, _ in traverse(x0, y0, dx, dy, length, world.resolution, world.occupied.shape):
        if world.occupied[cell]:
            return cell
    return None


# ----------------------------------------------------------------------------- ground truth

def geodesic_distance(world: WorldMap, a: Pose, b: Pose) -> float:
    """Shortest 8-connected free-space distance in meters; ``math.inf`` if unreachable."""
    ca, cb = a.cell(world.resolution), b.cell(world.resolution)
    if ca == cb:
        return 0.0
    if world.occupied[ca] or world.occupied[cb]:
        return math.inf
    d = dijkstra_cells(world.free, [ca])[cb]
    return float(d * world.resolution)


def success_cells(world: WorldMap, goal: GoalSpec, radius: float = 0.5) -> list[Cell]:
    """Free cells whose centers satisfy the success test for some target instance."""
    cells = set()
    res = world.resolution
    reach = int(math.ceil(radius / res)) + 1
    for oid in goal.target_ids:
        obj = world.object(oid)
        r0, c0 = world_to_cell(*obj.centroid, res)
        for r in range(r0 - reach, r0 + reach + 1):
            for c in range(c0 - reach, c0 + reach + 1):
                if not in_bounds((r, c), world.occupied.shape) or world.occupied[r, c]:
                    continue
                x, y = cell_center((r, c), res)
                if within_reach(world, x, y, obj, radius):
                    cells.add((r, c))
    return sorted(cells)


def within_reach(world: WorldMap, x: float, y: float, obj: GroundTruthObject,
                 radius: float = 0.5) -> bool:
    if math.hypot(x - obj.centroid[0], y - obj.centroid[1]) > radius:
        return False
    return not segment_blocked(world.occupied, x, y, obj.centroid[0], obj.centroid[1],
                               world.resolution, ignore=obj.footprint)


def is_success(world: WorldMap, pose: Pose, goal: GoalSpec, radius: float = 0.5) -> bool:
    return any(within_reach(world, pose.x, pose.y, world.object(oid), radius)
               for oid in goal.target_ids)


def shortest_path_to_goal(world: WorldMap, pose: Pose, goal: GoalSpec, radius: float = 0.5) -> float:
    """Geodesic meters from ``pose`` to the nearest success cell (inf if none reachable)."""
    if is_success(world, pose, goal, radius):
        return 0.0
    targets = success_cells(world, goal, radius)
    if not targets:
        return math.inf
    dist = dijkstra_cells(world.free, [pose.cell(world.resolution)])
    best = float(min(dist[c] for c in targets) * world.resolution)
    # cell-center geodesics can read 0 when the start cell already qualifies; the
    # straight-line gap to the reach radius is a lower bound on the true travel
    gap = min(math.hypot(pose.x - world.object(oid).centroid[0],
                         pose.y - world.object(oid).centroid[1]) - radius
              for oid in goal.target_ids)
    return max(best, gap, 0.0)
