"""Four-stage navigation policy: retrieval, revisiting, exploring, waypoint navigation.

One observation in, one action out. Retrieval is a decision step that never
emits an action itself; it routes to waypoint navigation (a verified target
is known), exploring (frontiers remain) or revisiting (the map is complete,
so re-scan the skeleton keypoints for missed detections).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .belief import (BeliefCache, BeliefProvider, build_node_prompt, build_object_prompt,
                     evaluate_endpoint_beliefs, propagate_to_junctions, verification_belief)
from .goals import GoalSpec, Modality
from .grid import Cell, cell_center, segment_cells, trace_predecessors
from .mapping import (CaptionSource, FREE, ObjectMap, OccupancyGrid, RelevanceProvider, ValueMap,
                      relevance_score, scan_cells, update_object_map, update_occupancy,
                      update_value_map)
from .planner import (NoPath, build_instance, cluster_frontiers, distances_from, frontier_beliefs,
                      lookahead,
                      plan_astar, softmax_probs, solve, traversal_cost)
from .sim_env import FORWARD_STEP_M, Action, Observation, Pose, wrap_angle
from .ssmg import MemoryGraph, SSMG, match_records

MAP_MODES = ("ssmg", "value-map", "semantic-map")
PLANNERS = ("lhp", "greedy")
SPIN_TURNS = 12


class ConfigError(ValueError):
    pass


class Stage(str, enum.Enum):
    RETRIEVAL = "retrieval"
    REVISITING = "revisiting"
    EXPLORING = "exploring"
    WAYPOINT = "waypoint_nav"
    DONE = "done"


@dataclass(frozen=True)
class PolicyConfig:
    map_mode: str = "ssmg"
    planner: str = "lhp"
    revisit: bool = True
    persist: bool = True
    tau: float = 1.0
    verify_threshold: float = 0.6
    max_sweeps: int = 100
    best_improvement: bool = False
    free_first: bool = False
    fixpoint: bool = False
    unknown_cost: float = 2.0
    lookahead_m: float = 0.75
    bearing_threshold_deg: float = 15.0
    success_radius_m: float = 0.5
    approach_radius_m: float = 0.35
    frontier_min_size: int = 3
    frontier_reach_m: float = 0.5
    frontier_blacklist_m: float = 0.75
    arrive_node_m: float = 0.3

    def __post_init__(self) -> None:
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"unknown map mode {self.map_mode!r}; expected one of {MAP_MODES}")
        if self.planner not in PLANNERS:
            raise ConfigError(f"unknown planner {self.planner!r}; expected one of {PLANNERS}")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.verify_threshold <= 1.0:
            raise ConfigError("verify_threshold must lie in [0, 1]")

    @property
    def uses_skeleton(self) -> bool:
        return self.map_mode == "ssmg"

    @property
    def keeps_memory(self) -> bool:
        return self.persist and self.map_mode != "value-map"

    @property
    def revisits(self) -> bool:
        return self.revisit and self.uses_skeleton

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RevisitPayload:
    stops: list[tuple[int, Cell]]  # (node id, cell), junctions each followed by their endpoints
    index: int = 0
    spin_left: int = 0


@dataclass
class ExplorePayload:
    target: Cell | None = None


@dataclass
class WaypointPayload:
    instance_id: str
    return_stage: Stage


@dataclass
class PolicyState:
    stage: Stage
    payload: RevisitPayload | ExplorePayload | WaypointPayload | None = None

    def check(self) -> None:
        expected = {Stage.REVISITING: RevisitPayload, Stage.EXPLORING: ExplorePayload,
                    Stage.WAYPOINT: WaypointPayload}
        kind = expected.get(self.stage)
        if kind is None:
            assert self.payload is None, f"{self.stage} carries no payload"
        else:
            assert isinstance(self.payload, kind), f"{self.stage} needs {kind.__name__}"


@dataclass
class SubtaskContext:
    goal: GoalSpec
    budget: int = 500
    target_location: tuple[float, float] | None = None
    outcome: str = "pending"

    def spend(self) -> None:
        if self.budget <= 0:
            raise RuntimeError("budget exhausted")
        self.budget -= 1

    def finish(self, success: bool) -> None:
        if self.outcome != "pending":
            raise RuntimeError("outcome already set")
        self.outcome = "success" if success else "failure"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    stage: str
    action: str
    pose: tuple[float, float, float]
    detail: str = ""


def _turn_toward(err: float) -> Action:
    return Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT


class NavigationAgent:
    """Single-episode agent; call :meth:`start_subtask` then :meth:`act` per observation."""

    def __init__(self, shape: tuple[int, int], resolution: float, config: PolicyConfig,
                 provider: BeliefProvider, relevance: RelevanceProvider, captions: CaptionSource,
                 cells_fn=None):
        self.shape = shape
        self.resolution = resolution
        self.config = config
        self.provider = provider
        self.relevance = relevance
        self.captions = captions
        self.cells_fn = cells_fn or (lambda obs: scan_cells(obs, resolution, shape))
        self.grid = OccupancyGrid.empty(*shape, resolution)
        self.map_views = 0  # observations folded into the current grid
        self.omap = ObjectMap()
        self.vmap = ValueMap.empty(*shape)
        self.memory = MemoryGraph(fixpoint=config.fixpoint)
        self.beliefs = BeliefCache()
        self.state = PolicyState(Stage.RETRIEVAL)
        self.goal: GoalSpec | None = None
        self.trace: list[TraceRecord] = []
        self._reset_subtask_state()

    # ------------------------------------------------------------------ lifecycle

    def _reset_subtask_state(self) -> None:
        self.verdicts: dict[str, bool] = {}
        self.blocked_targets: set[str] = set()
        self.frontier_blacklist = np.zeros(self.shape, dtype=bool)
        self.detour: Action | None = None
        self.force_forward = False
        self.revisit_rounds = 0
        self.note = ""
        self._pose = Pose(0.0, 0.0)

    def start_subtask(self, goal: GoalSpec) -> PolicyState:
        if not self.config.keeps_memory:
            self.grid = OccupancyGrid.empty(*self.shape, self.resolution)
            self.map_views = 0
            self.omap = ObjectMap()
            self.memory.clear()
        self.vmap = ValueMap.empty(*self.shape)
        self.beliefs.clear()
        self.goal = goal
        self._reset_subtask_state()
        self.state = PolicyState(Stage.RETRIEVAL)
        return self.state

    def integrate(self, obs: Observation) -> None:
        free, occ = self.cells_fn(obs)
        update_occupancy(self.grid, obs, (free, occ))
        self.map_views += 1
        update_object_map(self.omap, obs, self.captions, self.resolution)
        if self.goal is not None:
            score = relevance_score(obs, self.goal, self.relevance)
            update_value_map(self.vmap, obs, score, self.resolution, free)

    def act(self, obs: Observation) -> Action:
        if self.goal is None:
            raise RuntimeError("start_subtask must be called first")
        self.integrate(obs)
        self._pose = obs.pose
        self.note = ""
        action = self._decide(obs.pose)
        self.state.check()
        p = obs.pose
        self.trace.append(TraceRecord(obs.step_index, self.state.stage.value, action.value,
                                      (p.x, p.y, p.heading), self.note))
        return action

    # ------------------------------------------------------------------ decision

    def _decide(self, pose: Pose) -> Action:
        if self.state.stage is Stage.DONE:
            return Action.STOP
        if self.state.stage is not Stage.WAYPOINT:
            hit = self._check_candidates()
            if hit is not None:
                back = self.state.stage
                self.state = PolicyState(Stage.WAYPOINT, WaypointPayload(hit, back))
        for _ in range(6):
            stage = self.state.stage
            if stage is Stage.RETRIEVAL:
                act = self._retrieve()
            elif stage is Stage.WAYPOINT:
                act = self._waypoint_step(pose)
            elif stage is Stage.EXPLORING:
                act = self._explore_step(pose)
            elif stage is Stage.REVISITING:
                act = self._revisit_step(pose)
            else:
                act = Action.STOP
            if act is not None:
                return act
        self.note = "idle"
        return Action.TURN_LEFT

    def _retrieve(self) -> Action | None:
        """Route after the candidate check found no verified target."""
        if self._frontiers():
            self.state = PolicyState(Stage.EXPLORING, ExplorePayload())
            return None
        if self.map_views < SPIN_TURNS:
            # a fresh map seen from one pose (e.g. facing a wall) has no frontiers yet
            self.note = "look around"
            return Action.TURN_LEFT
        if self.config.revisits:
            stops = self._revisit_plan()
            if stops:
                self.revisit_rounds += 1
                self.state = PolicyState(Stage.REVISITING, RevisitPayload(stops))
                return None
        self.state = PolicyState(Stage.DONE)
        self.note = "exhausted"
        return Action.STOP

    # ------------------------------------------------------------------ retrieval and verification

    def current_ssmg(self) -> SSMG | None:
        if not self.config.uses_skeleton:
            return None
        return self.memory.update(self.grid, self.omap)

    def _check_candidates(self) -> str | None:
        for rid, _ in match_records(self.omap, self.goal):
            if rid in self.blocked_targets:
                continue
            if rid not in self.verdicts:
                self.verdicts[rid] = self.verify_candidate(rid)
            if self.verdicts[rid]:
                return rid
        return None

    def verify_candidate(self, instance_id: str) -> bool:
        goal = self.goal
        if goal.modality is Modality.IMAGE:
            return instance_id == goal.payload
        ssmg = self.current_ssmg()
        node = ssmg.nearest.get(instance_id) if ssmg is not None else None
        if node is not None:
            art = build_node_prompt(ssmg, node, goal, self.omap, self.grid, focus_id=instance_id)
        else:
            art = build_object_prompt(self.omap, instance_id, goal, self.resolution)
        belief = verification_belief(self.provider, art)
        self.note = f"verify {instance_id}: {belief}"
        return belief is not None and belief >= self.config.verify_threshold

    # ------------------------------------------------------------------ waypoint navigation

    def _visible(self, pose: Pose, target: tuple[float, float], ignore) -> bool:
        for cell in segment_cells(pose.x, pose.y, target[0], target[1], self.resolution, self.shape):
            if cell not in ignore and self.grid.labels[cell] != FREE:
                return False
        return True

    def at_target(self, pose: Pose, instance_id: str) -> bool:
        rec = self.omap.records[instance_id]
        if math.hypot(pose.x - rec.centroid[0], pose.y - rec.centroid[1]) > self.config.success_radius_m:
            return False
        return self._visible(pose, rec.centroid, rec.footprint)

    def _approach_cells(self, instance_id: str) -> list[Cell]:
        rec = self.omap.records[instance_id]
        res = self.resolution
        reach = int(math.ceil(self.config.success_radius_m / res)) + 1
        r0, c0 = int(rec.centroid[1] // res), int(rec.centroid[0] // res)
        near, far = [], []
        for r in range(r0 - reach, r0 + reach + 1):
            for c in range(c0 - reach, c0 + reach + 1):
                if not (0 <= r < self.shape[0] and 0 <= c < self.shape[1]):
                    continue
                if self.grid.labels[r, c] != FREE:
                    continue
                x, y = cell_center((r, c), res)
                d = math.hypot(x - rec.centroid[0], y - rec.centroid[1])
                if d > self.config.success_radius_m:
                    continue
                if not self._visible(Pose(x, y), rec.centroid, rec.footprint):
                    continue
                (near if d <= self.config.approach_radius_m else far).append((d, (r, c)))
        pool = near or sorted(far)[:1]
        return [c for _, c in pool]

    def _waypoint_step(self, pose: Pose) -> Action | None:
        pay: WaypointPayload = self.state.payload
        iid = pay.instance_id
        if self.at_target(pose, iid):
            self.state = PolicyState(Stage.DONE)
            self.note = f"arrived {iid}"
            return Action.STOP
        cells = self._approach_cells(iid)
        cost = traversal_cost(self.grid, self.config.unknown_cost)
        try:
            path = plan_astar(cost, pose.cell(self.resolution), cells)
        except NoPath:
            self.blocked_targets.add(iid)
            self.note = f"unreachable {iid}"
            back = pay.return_stage
            self.state = self._resume(back)
            return None
        self.note = f"to {iid}"
        return self._drive(path, pose)

    def _resume(self, stage: Stage) -> PolicyState:
        """State to fall back to after an abandoned waypoint; exploring resumes directly."""
        if stage is Stage.EXPLORING:
            return PolicyState(Stage.EXPLORING, ExplorePayload())
        return PolicyState(Stage.RETRIEVAL)

    # ------------------------------------------------------------------ exploring

    def _frontiers(self) -> list[Cell]:
        return cluster_frontiers(self.grid, self.config.frontier_min_size,
                                 exclude=self.frontier_blacklist)

    def _blacklist_near(self, cell: Cell, radius_m: float) -> None:
        k = int(math.ceil(radius_m / self.resolution))
        r0, c0 = cell
        for r in range(max(0, r0 - k), min(self.shape[0], r0 + k + 1)):
            for c in range(max(0, c0 - k), min(self.shape[1], c0 + k + 1)):
                if math.hypot(r - r0, c - c0) * self.resolution <= radius_m + 1e-9:
                    self.frontier_blacklist[r, c] = True

    def choose_frontier(self, pose: Pose, points: list[Cell]):
        """Pick the frontier to head for.

        Returns (target, unreachable frontiers, predecessor map of the agent's
        cell); the map yields the shortest path to the target.
        """
        cost = traversal_cost(self.grid, self.config.unknown_cost)
        beliefs = frontier_beliefs(self.vmap, points, self.resolution)
        if self.config.map_mode == "semantic-map" or self.config.planner == "greedy":
            # one-step rules need only distances from the agent
            dist, pred = distances_from(cost, pose.cell(self.resolution), points, self.resolution)
            keep = [i for i, d in enumerate(dist) if math.isfinite(d)]
            unreachable = [p for i, p in enumerate(points) if i not in keep]
            if not keep:
                return None, unreachable, pred
            if self.config.map_mode == "semantic-map":
                i = min(keep, key=lambda i: (dist[i], i))
            else:
                i = min(keep, key=lambda i: (-beliefs[i], dist[i], i))
            return points[i], unreachable, pred
        inst, keep, pred = build_instance(cost, pose, points, beliefs, self.resolution,
                                          self.config.tau, with_predecessors=True)
        unreachable = [p for i, p in enumerate(points) if i not in keep]
        if inst is None:
            return None, unreachable, pred
        order = solve(inst, "lhp", self.config.max_sweeps, self.config.best_improvement,
                      self.config.free_first)
        return points[keep[order.order[0]]], unreachable, pred

    def _explore_step(self, pose: Pose) -> Action | None:
        here = pose.cell(self.resolution)
        for _ in range(4):
            points = self._frontiers()
            if not points:
                break
            target, unreachable, pred = self.choose_frontier(pose, points)
            for p in unreachable:
                self._blacklist_near(p, self.config.frontier_blacklist_m)
            if target is None:
                continue
            tx, ty = cell_center(target, self.resolution)
            if math.hypot(tx - pose.x, ty - pose.y) <= self.config.frontier_reach_m:
                self._blacklist_near(target, self.config.frontier_blacklist_m)
                continue
            path = trace_predecessors(pred, target)
            self.state.payload.target = target
            self.note = f"frontier {target}"
            return self._drive(path, pose)
        # frontiers exhausted: back to the retrieval tree, which now takes branch (c)
        self.state = PolicyState(Stage.RETRIEVAL)
        return None

    # ------------------------------------------------------------------ revisiting

    def _revisit_plan(self) -> list[tuple[int, Cell]]:
        ssmg = self.current_ssmg()
        if ssmg is None or not ssmg.nodes:
            return []
        ep = evaluate_endpoint_beliefs(ssmg, self.goal, self.provider, self.omap, self.grid,
                                       self.beliefs)
        table = propagate_to_junctions(ssmg, ep, self.goal, self.provider, self.omap, self.grid,
                                       self.beliefs)
        keys = ssmg.junctions or ssmg.endpoints
        cells = [n.cell for n in keys]
        beliefs = [table[n.node_id] for n in keys]
        cost = traversal_cost(self.grid, None)
        pose = self._pose
        inst, keep = build_instance(cost, pose, cells, beliefs, self.resolution, self.config.tau)
        if inst is None:
            return []
        if self.config.planner == "greedy":
            order = sorted(range(inst.n), key=lambda i: (-inst.probs[i], inst.dist[0, i + 1], i))
        else:
            order = list(solve(inst, "lhp", self.config.max_sweeps, self.config.best_improvement,
                               self.config.free_first).order)
        stops: list[tuple[int, Cell]] = []
        seen: set[int] = set()
        for i in order:
            node = keys[keep[i]]
            stops.append((node.node_id, node.cell))
            seen.add(node.node_id)
            if node.kind.value != "junction":
                continue
            ends = [ssmg.nodes[e] for e in ssmg.adjacent_endpoints(node.node_id) if e not in seen]
            ends.sort(key=lambda e: (math.hypot(e.cell[0] - node.cell[0], e.cell[1] - node.cell[1]),
                                     e.node_id))
            for e in ends:
                stops.append((e.node_id, e.cell))
                seen.add(e.node_id)
        self.note = f"revisit plan {[s[0] for s in stops]}"
        return stops


    def _revisit_step(self, pose: Pose) -> Action | None:
        pay: RevisitPayload = self.state.payload
        here = pose.cell(self.resolution)
        cost = traversal_cost(self.grid, None)
        while pay.index < len(pay.stops):
            nid, cell = pay.stops[pay.index]
            if pay.spin_left > 0:
                pay.spin_left -= 1
                if pay.spin_left == 0:
                    pay.index += 1
                self.note = f"spin at {nid}"
                return Action.TURN_LEFT
            x, y = cell_center(cell, self.resolution)
            if math.hypot(x - pose.x, y - pose.y) <= self.config.arrive_node_m:
                pay.spin_left = SPIN_TURNS
                continue
            try:
                path = plan_astar(cost, here, cell)
            except NoPath:
                pay.index += 1
                continue
            self.note = f"to node {nid}"
            return self._drive(path, pose)
        self.state = PolicyState(Stage.RETRIEVAL)
        return None

    # ------------------------------------------------------------------ controller

    def _carrot(self, path: list[Cell], pose: Pose) -> tuple[float, float]:
        res = self.resolution
        la = lookahead(path, self.config.lookahead_m, res)
        if self._visible_known(pose, (la.x, la.y)):
            return la.x, la.y
        best = cell_center(path[min(1, len(path) - 1)], res)
        travelled = 0.0
        for a, b in zip(path, path[1:]):
            travelled += math.hypot(a[0] - b[0], a[1] - b[1]) * res
            if travelled > self.config.lookahead_m + 1e-9:
                break
            pt = cell_center(b, res)
            if self._visible_known(pose, pt):
                best = pt
        return best

    def _visible_known(self, pose: Pose, pt: tuple[float, float]) -> bool:
        occ = self.grid.occupied
        for cell in segment_cells(pose.x, pose.y, pt[0], pt[1], self.resolution, self.shape):
            if occ[cell]:
                return False
        return True

    def _forward_clear(self, pose: Pose) -> bool:
        nx = pose.x + FORWARD_STEP_M * math.cos(pose.heading)
        ny = pose.y + FORWARD_STEP_M * math.sin(pose.heading)
        h, w = self.shape
        if not (0 <= nx < w * self.resolution and 0 <= ny < h * self.resolution):
            return False
        return self._visible_known(pose, (nx, ny))

    def _drive(self, path: list[Cell], pose: Pose) -> Action:
        """Turn toward the carrot when off by more than the bearing threshold, else go forward."""
        cx, cy = self._carrot(path, pose)
        if math.hypot(cx - pose.x, cy - pose.y) < 1e-6:
            return Action.TURN_LEFT
        err = wrap_angle(math.atan2(cy - pose.y, cx - pose.x) - pose.heading)
        clear = self._forward_clear(pose)
        if self.force_forward and clear:
            self.force_forward = False
            self.detour = None
            return Action.FORWARD
        self.force_forward = False
        if abs(err) > math.radians(self.config.bearing_threshold_deg):
            self.detour = None
            return _turn_toward(err)
        if clear:
            self.detour = None
            return Action.FORWARD
        # blocked within the aligned cone: sidestep by turning one way until forward clears
        if self.detour is None:
            self.detour = _turn_toward(err if err != 0 else 1.0)
        self.force_forward = True
        return self.detour
