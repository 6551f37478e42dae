"""Semantic skeleton memory graph: skeleton keypoints with attached object sets.

Objects are attached to the keypoint nearest to the BEV projection of their
best view pose, each keypoint gets a radius equal to its farthest attached
object, and every object inside that radius joins the keypoint as well
(objects may belong to several keypoints). Endpoints are linked to the
junction their skeleton chain runs into.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .goals import GoalSpec, Modality
from .grid import Cell, cell_center
from .knowledge import jaccard
from .mapping import ObjectMap, ObjectRecord, OccupancyGrid, ValueMap, View
from .sim_env import Pose
from .skeleton import (EmptyFreeSpace, NodeKind, SkelEdge, SkeletonGraph, SkelNode,
                       match_node_ids, skeleton_graph)

ARCHIVE_FORMAT = "ssmg-archive"
ARCHIVE_VERSION = 1
DESCRIPTION_THRESHOLD = 0.2


class CorruptArchive(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"corrupt archive at byte {offset}: {message}")
        self.offset = offset


class UnknownNode(KeyError):
    pass


@dataclass(frozen=True)
class SSMGNode:
    node_id: int
    kind: NodeKind
    cell: Cell
    position: tuple[float, float]
    objects: frozenset[str] = frozenset()
    radius: float = 0.0
    belief: float | None = None


@dataclass
class SSMG:
    graph: SkeletonGraph
    nodes: dict[int, SSMGNode]
    augmentation: set[tuple[int, int]] = field(default_factory=set)  # (endpoint, junction)
    object_index: dict[str, frozenset[int]] = field(default_factory=dict)
    nearest: dict[str, int] = field(default_factory=dict)
    revision: int = 0
    fixpoint: bool = False  # closure mode used to build it

    @property
    def resolution(self) -> float:
        return self.graph.resolution

    def node(self, node_id: int) -> SSMGNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def of_kind(self, kind: NodeKind) -> list[SSMGNode]:
        return [self.nodes[k] for k in sorted(self.nodes) if self.nodes[k].kind is kind]

    @property
    def endpoints(self) -> list[SSMGNode]:
        return self.of_kind(NodeKind.ENDPOINT)

    @property
    def junctions(self) -> list[SSMGNode]:
        return self.of_kind(NodeKind.JUNCTION)

    def skeleton_edges(self) -> set[tuple[int, int]]:
        return {(min(e.a, e.b), max(e.a, e.b)) for e in self.graph.edges}

    @property
    def edges(self) -> set[tuple[int, int]]:
        return self.skeleton_edges() | {(min(a, b), max(a, b)) for a, b in self.augmentation}

    def adjacent_endpoints(self, junction_id: int) -> list[int]:
        return sorted(e for e, j in self.augmentation if j == junction_id)

    def adjacent_junctions(self, endpoint_id: int) -> list[int]:
        return sorted(j for e, j in self.augmentation if e == endpoint_id)

    def canonical(self) -> dict:
        """Order-independent structural summary, used for equality checks."""
        return {
            "nodes": sorted((n.node_id, n.kind.value, n.cell, sorted(n.objects), round(n.radius, 12))
                            for n in self.nodes.values()),
            "edges": sorted(self.edges),
            "augmentation": sorted(self.augmentation),
            "object_index": sorted((k, sorted(v)) for k, v in self.object_index.items()),
        }


def projected_view(record: ObjectRecord) -> tuple[float, float]:
    """BEV projection of the record's best view pose."""
    pose = record.best_view.pose
    return pose.x, pose.y


def attach_objects(graph: SkeletonGraph, omap: ObjectMap, fixpoint: bool = False,
                   revision: int = 0) -> SSMG:
    """Nearest-node assignment, farthest-member radius, then radius closure.

    The closure runs once; ``fixpoint=True`` instead repeats radius growth and
    closure until nothing changes (an experiment flag).
    """
    if not graph.nodes:
        raise ValueError("skeleton graph has no nodes")
    res = graph.resolution
    ids = [n.node_id for n in sorted(graph.nodes, key=lambda n: n.node_id)]
    pos = {n.node_id: cell_center(n.cell, res) for n in graph.nodes}
    objs = sorted(omap.records)
    proj = {j: projected_view(omap.records[j]) for j in objs}
    dist = {(n, j): math.hypot(pos[n][0] - proj[j][0], pos[n][1] - proj[j][1])
            for n in ids for j in objs}

    nearest: dict[str, int] = {}
    for j in objs:
        nearest[j] = min(ids, key=lambda n: (dist[n, j], n))
    members: dict[int, set[str]] = {n: set() for n in ids}
    for j, n in nearest.items():
        members[n].add(j)
    radius = {n: max((dist[n, j] for j in members[n]), default=0.0) for n in ids}
    while True:
        changed = False
        for n in ids:
            for j in objs:
                if j not in members[n] and dist[n, j] <= radius[n]:
                    members[n].add(j)
                    changed = True
        if not fixpoint or not changed:
            break
        radius = {n: max((dist[n, j] for j in members[n]), default=0.0) for n in ids}

    nodes = {}
    for n in graph.nodes:
        nodes[n.node_id] = SSMGNode(n.node_id, n.kind, n.cell, pos[n.node_id],
                                    frozenset(members[n.node_id]), radius[n.node_id])
    index: dict[str, set[int]] = {j: set() for j in objs}
    for n in ids:
        for j in members[n]:
            index[j].add(n)
    return SSMG(graph, nodes, set(), {j: frozenset(v) for j, v in index.items()}, nearest,
                revision, fixpoint)


def augment_edges(ssmg: SSMG) -> SSMG:
    """Link every endpoint to each junction its skeleton chain terminates at."""
    kinds = {k: n.kind for k, n in ssmg.nodes.items()}
    for e in ssmg.graph.edges:
        for a, b in ((e.a, e.b), (e.b, e.a)):
            if kinds[a] is NodeKind.ENDPOINT and kinds[b] is NodeKind.JUNCTION:
                ssmg.augmentation.add((a, b))
    return ssmg


def record_match_score(record: ObjectRecord, goal: GoalSpec) -> float:
    """Retrieval score of one record for ``goal``; 0 means no match."""
    if goal.modality is Modality.CATEGORY:
        return 1.0 if record.category == goal.payload else 0.0
    if goal.modality is Modality.IMAGE:
        return 1.0 if record.instance_id == goal.payload else 0.0
    score = jaccard(record.tokens | {record.category}, goal.tokens)
    return score if score >= DESCRIPTION_THRESHOLD else 0.0


def match_records(omap: ObjectMap, goal: GoalSpec) -> list[tuple[str, float]]:
    """Matching record ids with scores, best first, ties by id."""
    hits = [(rid, record_match_score(rec, goal)) for rid, rec in omap.records.items()]
    hits = [h for h in hits if h[1] > 0.0]
    hits.sort(key=lambda h: (-h[1], h[0]))
    return hits


def query_instances(ssmg: SSMG | None, omap: ObjectMap, goal: GoalSpec) -> list[tuple[str, int]]:
    """Candidate (instance_id, owning node) pairs for ``goal``; node -1 when unattached."""
    out = []
    for rid, _ in match_records(omap, goal):
        node = -1
        if ssmg is not None:
            node = ssmg.nearest.get(rid, -1)
        out.append((rid, node))
    return out


class MemoryGraph:
    """Rebuilds the SSMG on demand while keeping node ids and the revision monotone."""

    def __init__(self, fixpoint: bool = False, match_cells: float = 3.0):
        self.fixpoint = fixpoint
        self.match_cells = match_cells
        self.graph: SkeletonGraph | None = None
        self.ssmg: SSMG | None = None
        self.next_id = 0
        self.revision = 0
        self._grid_key: bytes | None = None
        self._omap_key: tuple | None = None

    def clear(self) -> None:
        self.graph = None
        self.ssmg = None
        self._grid_key = None
        self._omap_key = None

    def update(self, grid: OccupancyGrid, omap: ObjectMap) -> SSMG | None:
        grid_key = grid.labels.tobytes()
        omap_key = (omap.version, len(omap.records))
        if self.ssmg is not None and grid_key == self._grid_key and omap_key == self._omap_key:
            return self.ssmg
        if grid_key != self._grid_key:
            try:
                raw = skeleton_graph(grid)
            except EmptyFreeSpace:
                return self.ssmg
            if not raw.nodes:
                return self.ssmg
            self.graph, self.next_id = match_node_ids(self.graph, raw, self.next_id,
                                                      self.match_cells)
        self.revision += 1
        self.ssmg = augment_edges(attach_objects(self.graph, omap, self.fixpoint, self.revision))
        self._grid_key, self._omap_key = grid_key, omap_key
        return self.ssmg


# ----------------------------------------------------------------------------- archive

def _graph_to_json(g: SkeletonGraph) -> dict:
    return {
        "resolution": g.resolution,
        "nodes": [[n.node_id, n.kind.value, list(n.cell), [list(m) for m in n.members]]
                  for n in g.nodes],
        "edges": [[e.a, e.b, [list(c) for c in e.chain], e.length] for e in g.edges],
    }


def _graph_from_json(d: dict) -> SkeletonGraph:
    nodes = [SkelNode(int(i), NodeKind(k), (int(c[0]), int(c[1])),
                      tuple((int(m[0]), int(m[1])) for m in mem)) for i, k, c, mem in d["nodes"]]
    edges = [SkelEdge(int(a), int(b), tuple((int(c[0]), int(c[1])) for c in ch), float(ln))
             for a, b, ch, ln in d["edges"]]
    return SkeletonGraph(nodes, edges, float(d["resolution"]))


def _pose_json(p: Pose) -> list[float]:
    return [p.x, p.y, p.heading]


def _omap_to_json(omap: ObjectMap) -> dict:
    recs = []
    for rid in sorted(omap.records):
        r = omap.records[rid]
        recs.append({
            "id": r.instance_id, "category": r.category,
            "footprint": sorted([list(c) for c in r.footprint]),
            "centroid": list(r.centroid), "room": r.room, "tokens": sorted(r.tokens),
            "views": [{"pose": _pose_json(v.pose), "caption": v.caption, "score": v.score}
                      for v in r.views],
        })
    return {"version": omap.version, "records": recs}


def _omap_from_json(d: dict) -> ObjectMap:
    records = {}
    for r in d["records"]:
        views = [View(Pose(*v["pose"]), v["caption"], float(v["score"])) for v in r["views"]]
        records[r["id"]] = ObjectRecord(r["id"], r["category"],
                                        frozenset((int(a), int(b)) for a, b in r["footprint"]),
                                        (float(r["centroid"][0]), float(r["centroid"][1])),
                                        views, r["room"], frozenset(r["tokens"]))
    return ObjectMap(records, int(d["version"]))


def _grid_to_json(grid: OccupancyGrid) -> dict:
    return {"resolution": grid.resolution, "labels": grid.labels.tolist(),
            "free_ev": grid.free_ev.tolist(), "occ_ev": grid.occ_ev.tolist()}


def _grid_from_json(d: dict) -> OccupancyGrid:
    return OccupancyGrid(float(d["resolution"]), np.array(d["labels"], dtype=np.int8),
                         np.array(d["free_ev"], dtype=np.int32), np.array(d["occ_ev"], dtype=np.int32))


def dumps_archive(ssmg: SSMG | None, omap: ObjectMap, grid: OccupancyGrid,
                  vmaps: dict[str, ValueMap] | None = None) -> str:
    doc = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "ssmg": None if ssmg is None else {
            "graph": _graph_to_json(ssmg.graph),
            "revision": ssmg.revision,
            "fixpoint": ssmg.fixpoint,
        },
        "objects": _omap_to_json(omap),
        "grid": _grid_to_json(grid),
        "value_maps": {k: {"value": v.value.tolist(), "confidence": v.confidence.tolist()}
                       for k, v in sorted((vmaps or {}).items())},
    }
    # ascii-only output keeps character offsets equal to byte offsets
    return json.dumps(doc, ensure_ascii=True, sort_keys=True, separators=(",", ":"))


def loads_archive(text: str) -> tuple[SSMG | None, ObjectMap, OccupancyGrid, dict[str, ValueMap]]:
    """Inverse of :func:`dumps_archive`; beliefs come back cleared."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptArchive(exc.pos, exc.msg) from None
    end = len(text.encode("utf-8", "surrogatepass"))
    if not isinstance(doc, dict) or doc.get("format") != ARCHIVE_FORMAT:
        raise CorruptArchive(0, "not an SSMG archive")
    if doc.get("version") != ARCHIVE_VERSION:
        raise CorruptArchive(0, f"unsupported version {doc.get('version')!r}")
    try:
        omap = _omap_from_json(doc["objects"])
        grid = _grid_from_json(doc["grid"])
        vmaps = {k: ValueMap(np.array(v["value"], dtype=float), np.array(v["confidence"], dtype=float))
                 for k, v in doc["value_maps"].items()}
        ssmg = None
        if doc["ssmg"] is not None:
            graph = _graph_from_json(doc["ssmg"]["graph"])
            ssmg = augment_edges(attach_objects(graph, omap, bool(doc["ssmg"]["fixpoint"]),
                                                int(doc["ssmg"]["revision"])))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CorruptArchive(end, f"malformed content: {exc!r}") from None
    return ssmg, omap, grid, vmaps


def persist(path: str | Path, ssmg: SSMG | None, omap: ObjectMap, grid: OccupancyGrid,
            vmaps: dict[str, ValueMap] | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_archive(ssmg, omap, grid, vmaps))
    tmp.replace(path)
    return path


def restore(path: str | Path) -> tuple[SSMG | None, ObjectMap, OccupancyGrid, dict[str, ValueMap]]:
    data = Path(path).read_bytes()
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise CorruptArchive(exc.start, "non-ascii byte") from None
    return loads_archive(text)
