"""Per-node prompt artifacts, belief providers and endpoint-to-junction propagation."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Protocol

import numpy as np

from .goals import GoalSpec
from .grid import dijkstra_cells, world_to_cell
from .knowledge import AffinityTable, default_table
from .mapping import FREE, OCCUPIED, ObjectMap, OccupancyGrid
from .sim_env import WorldMap, success_cells
from .skeleton import NodeKind
from .ssmg import SSMG, UnknownNode

log = logging.getLogger(__name__)

NEUTRAL_BELIEF = 0.5
MIN_CROP_M = 3.0
PX_UNKNOWN, PX_FREE, PX_OCCUPIED, PX_OBJECT = 0, 128, 255, 64


class ProviderFailure(RuntimeError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


@lru_cache(maxsize=1)
def instruction_template() -> str:
    return resources.files("ssmg_nav.data").joinpath("prompt_template.txt").read_text()


@dataclass(frozen=True)
class PromptLine:
    object_id: str
    object_class: str
    caption: str
    room: str = ""


@dataclass(frozen=True)
class EndpointSummary:
    node_id: int
    histogram: tuple[tuple[str, int], ...]
    belief: float


@dataclass(frozen=True)
class PromptArtifact:
    node_id: int
    kind: NodeKind
    cell: tuple[int, int]
    position: tuple[float, float]
    goal: GoalSpec
    text_block: tuple[PromptLine, ...]
    bev_shape: tuple[int, int]
    bev_bytes: bytes
    annotations: tuple[tuple[str, int, int], ...]  # (object id, crop row, crop col)
    context: tuple[EndpointSummary, ...] = ()
    focus_id: str | None = None

    @property
    def goal_text(self) -> str:
        return self.goal.render()

    def bev_image(self) -> np.ndarray:
        return np.frombuffer(self.bev_bytes, dtype=np.uint8).reshape(self.bev_shape)

    def instruction(self) -> str:
        objects = "\n".join(f"{ln.object_id} | {ln.object_class} | {ln.caption}"
                            for ln in self.text_block) or "(none)"
        ctx = ""
        if self.context:
            parts = []
            for s in self.context:
                hist = ", ".join(f"{k} x{v}" for k, v in s.histogram) or "nothing"
                parts.append(f"end node {s.node_id}: {hist}; estimated likelihood {s.belief:.3f}")
            ctx = "Neighbouring end nodes:\n" + "\n".join(parts)
        return instruction_template().format(goal=self.goal_text, node_id=self.node_id,
                                             kind=self.kind.value, objects=objects, context=ctx)

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "kind": self.kind.value,
            "goal": self.goal_text,
            "focus_id": self.focus_id,
            "text_block": [[ln.object_id, ln.object_class, ln.caption] for ln in self.text_block],
            "annotations": [list(a) for a in self.annotations],
            "context": [[s.node_id, [list(h) for h in s.histogram], s.belief] for s in self.context],
            "image_shape": list(self.bev_shape),
            "image_b64": base64.b64encode(self.bev_bytes).decode("ascii"),
            "instruction": self.instruction(),
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()


def _bev_crop(grid: OccupancyGrid | None, center: tuple[int, int],
              side_cells: int) -> tuple[np.ndarray, tuple[int, int]]:
    r0 = center[0] - side_cells // 2
    c0 = center[1] - side_cells // 2
    img = np.zeros((side_cells, side_cells), np.uint8)
    if grid is not None:
        h, w = grid.shape
        rs, re = max(r0, 0), min(r0 + side_cells, h)
        cs, ce = max(c0, 0), min(c0 + side_cells, w)
        if rs < re and cs < ce:
            lab = grid.labels[rs:re, cs:ce]
            sub = img[rs - r0:re - r0, cs - c0:ce - c0]
            sub[lab == FREE] = PX_FREE
            sub[lab == OCCUPIED] = PX_OCCUPIED
    return img, (r0, c0)


def build_node_prompt(ssmg: SSMG, node_id: int, goal: GoalSpec, omap: ObjectMap,
                      grid: OccupancyGrid | None = None,
                      endpoint_beliefs: dict[int, float] | None = None,
                      focus_id: str | None = None) -> PromptArtifact:
    """Deterministic prompt for one node; junctions embed their endpoints' summaries."""
    if node_id not in ssmg.nodes:
        raise UnknownNode(node_id)
    node = ssmg.nodes[node_id]
    res = ssmg.resolution
    lines = []
    for oid in sorted(node.objects):
        rec = omap.records.get(oid)
        if rec is None:
            continue
        lines.append(PromptLine(oid, rec.category, rec.best_view.caption, rec.room))
    side_m = max(2.0 * node.radius, MIN_CROP_M)
    side = max(1, int(math.ceil(side_m / res - 1e-9)))
    img, (r0, c0) = _bev_crop(grid, node.cell, side)
    notes = []
    for ln in lines:
        r, c = world_to_cell(*omap.records[ln.object_id].centroid, res)
        notes.append((ln.object_id, r - r0, c - c0))
        if 0 <= r - r0 < side and 0 <= c - c0 < side:
            img[r - r0, c - c0] = PX_OBJECT
    context = ()
    if node.kind is NodeKind.JUNCTION and endpoint_beliefs is not None:
        summaries = []
        for eid in ssmg.adjacent_endpoints(node_id):
            if eid not in endpoint_beliefs:
                continue
            hist = Counter(omap.records[o].category for o in ssmg.nodes[eid].objects
                           if o in omap.records)
            summaries.append(EndpointSummary(eid, tuple(sorted(hist.items())),
                                             float(endpoint_beliefs[eid])))
        context = tuple(summaries)
    return PromptArtifact(node_id, node.kind, node.cell, node.position, goal, tuple(lines),
                          img.shape, img.tobytes(), tuple(notes), context, focus_id)


def build_object_prompt(omap: ObjectMap, instance_id: str, goal: GoalSpec,
                        resolution: float) -> PromptArtifact:
    """Single-object prompt for map modes without a skeleton graph."""
    rec = omap.records[instance_id]
    cell = world_to_cell(*rec.centroid, resolution)
    line = PromptLine(instance_id, rec.category, rec.best_view.caption, rec.room)
    img = np.zeros((1, 1), np.uint8)
    return PromptArtifact(-1, NodeKind.ENDPOINT, cell, rec.centroid, goal, (line,), img.shape,
                          img.tobytes(), ((instance_id, 0, 0),), (), instance_id)


# ----------------------------------------------------------------------------- providers

class BeliefProvider(Protocol):
    name: str

    def evaluate(self, artifact: PromptArtifact) -> float: ...


def stable_seed(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _clamp(x: float) -> float:
    if not math.isfinite(x):
        return NEUTRAL_BELIEF
    return min(1.0, max(0.0, x))


class CooccurrenceProvider:
    """Commonsense surrogate: strongest object-goal affinity, blended with room affinity."""

    name = "cooccurrence"

    def __init__(self, table: AffinityTable | None = None):
        self.table = table or default_table()

    def _line_score(self, ln: PromptLine, goal: GoalSpec) -> float:
        tokens = frozenset(ln.caption.split())
        return self.table.object_score(ln.object_class, ln.room, tokens, goal, ln.object_id)

    def evaluate(self, artifact: PromptArtifact) -> float:
        lines = artifact.text_block
        if artifact.focus_id is not None:
            lines = tuple(ln for ln in lines if ln.object_id == artifact.focus_id)
        best = self.table.floor
        for ln in lines:
            best = max(best, self._line_score(ln, artifact.goal))
        if artifact.focus_id is None:
            for s in artifact.context:
                best = max(best, s.belief)
        return _clamp(best)


class OracleProvider:
    """Ground-truth surrogate: exp(-geodesic to the true goal / scale) plus seeded noise."""

    name = "oracle"

    def __init__(self, world: WorldMap, sigma: float = 0.0, scale_m: float = 3.0, seed: int = 0):
        self.world = world
        self.sigma = sigma
        self.scale_m = scale_m
        self.seed = seed
        self._fields: dict[str, np.ndarray] = {}

    def _field(self, goal: GoalSpec) -> np.ndarray:
        key = goal.key + "|" + ",".join(goal.target_ids)
        if key not in self._fields:
            cells = success_cells(self.world, goal)
            self._fields[key] = dijkstra_cells(self.world.free, cells) * self.world.resolution
        return self._fields[key]

    def _noise(self, artifact: PromptArtifact) -> float:
        if self.sigma <= 0:
            return 0.0
        rng = np.random.default_rng(stable_seed(self.seed, artifact.node_id, artifact.goal.key,
                                                artifact.focus_id))
        return float(rng.normal(0.0, self.sigma))

    def evaluate(self, artifact: PromptArtifact) -> float:
        if artifact.focus_id is not None:
            base = 1.0 if artifact.focus_id in artifact.goal.target_ids else 0.0
        else:
            d = float(self._field(artifact.goal)[artifact.cell])
            base = math.exp(-d / self.scale_m) if math.isfinite(d) else 0.0
        return _clamp(base + self._noise(artifact))


class RandomProvider:
    """Seeded uniform beliefs; a control with no information."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def evaluate(self, artifact: PromptArtifact) -> float:
        rng = np.random.default_rng(stable_seed(self.seed, artifact.node_id, artifact.goal.key,
                                                artifact.focus_id))
        return float(rng.random())


class RemoteProvider:
    """Posts the artifact as JSON to an HTTP endpoint that answers {"belief": number}."""

    name = "remote"

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def request_body(self, artifact: PromptArtifact) -> bytes:
        doc = artifact.to_json()
        body = {"node_id": doc["node_id"], "goal": doc["goal"], "text_block": doc["text_block"],
                "image_b64": doc["image_b64"], "instruction": doc["instruction"]}
        return json.dumps(body, sort_keys=True).encode()

    def evaluate(self, artifact: PromptArtifact) -> float:
        req = urllib.request.Request(self.url, data=self.request_body(artifact),
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode())
            value = float(reply["belief"])
        except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, TypeError) as exc:
            raise ProviderFailure(artifact.node_id, f"remote provider: {exc}") from None
        return _clamp(value)


# ----------------------------------------------------------------------------- belief tables

@dataclass
class BeliefTable:
    beliefs: dict[int, float]
    provider: str
    goal_hash: str
    revision: int
    failures: list[int] = field(default_factory=list)

    def __getitem__(self, node_id: int) -> float:
        return self.beliefs[node_id]

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.beliefs


class BeliefCache:
    """Beliefs keyed by (node, goal hash, SSMG revision, provider)."""

    def __init__(self):
        self._store: dict[tuple[int, str, int, str], float] = {}
        self.hits = 0
        self.misses = 0

    def get(self, key):
        v = self._store.get(key)
        if v is None:
            self.misses += 1
        else:
            self.hits += 1
        return v

    def put(self, key, value: float) -> None:
        self._store[key] = value

    def clear(self) -> None:
        self._store.clear()

    def __len__(self) -> int:
        return len(self._store)


def _evaluate(provider: BeliefProvider, artifact: PromptArtifact, fallback: float | None,
              failures: list[int]) -> float:
    try:
        return _clamp(float(provider.evaluate(artifact)))
    except ProviderFailure:
        if fallback is None:
            raise
        log.warning("provider failure on node %d; using neutral belief", artifact.node_id)
        failures.append(artifact.node_id)
        return fallback


def evaluate_endpoint_beliefs(ssmg: SSMG, goal: GoalSpec, provider: BeliefProvider,
                              omap: ObjectMap, grid: OccupancyGrid | None = None,
                              cache: BeliefCache | None = None,
                              fallback: float | None = NEUTRAL_BELIEF) -> BeliefTable:
    table = BeliefTable({}, provider.name, goal.key, ssmg.revision)
    for node in ssmg.endpoints:
        key = (node.node_id, goal.key, ssmg.revision, provider.name)
        value = cache.get(key) if cache is not None else None
        if value is None:
            art = build_node_prompt(ssmg, node.node_id, goal, omap, grid)
            value = _evaluate(provider, art, fallback, table.failures)
            if cache is not None:
                cache.put(key, value)
        table.beliefs[node.node_id] = value
    return table


def propagate_to_junctions(ssmg: SSMG, endpoints: BeliefTable, goal: GoalSpec,
                           provider: BeliefProvider, omap: ObjectMap,
                           grid: OccupancyGrid | None = None, cache: BeliefCache | None = None,
                           fallback: float | None = NEUTRAL_BELIEF) -> BeliefTable:
    """Evaluate every junction with its adjacent endpoints' summaries in the prompt."""
    ep = {k: v for k, v in endpoints.beliefs.items()
          if ssmg.nodes.get(k) is not None and ssmg.nodes[k].kind is NodeKind.ENDPOINT}
    table = BeliefTable(dict(endpoints.beliefs), provider.name, goal.key, ssmg.revision,
                        list(endpoints.failures))
    for node in ssmg.junctions:
        key = (node.node_id, goal.key, ssmg.revision, provider.name)
        value = cache.get(key) if cache is not None else None
        if value is None:
            art = build_node_prompt(ssmg, node.node_id, goal, omap, grid, ep)
            value = _evaluate(provider, art, fallback, table.failures)
            if cache is not None:
                cache.put(key, value)
        table.beliefs[node.node_id] = value
    return table


def verification_belief(provider: BeliefProvider, artifact: PromptArtifact) -> float | None:
    """Provider score for the focused object; None on provider failure."""
    try:
        return _clamp(float(provider.evaluate(artifact)))
    except ProviderFailure as exc:
        log.warning("verification failed: %s", exc)
        return None
