"""Episode runner, metrics, ablation suite and image rendering."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .belief import CooccurrenceProvider, OracleProvider, RandomProvider, RemoteProvider
from .goals import GoalSpec
from .grid import cell_center, dijkstra_cells
from .mapping import (CooccurrenceRelevance, FREE, OCCUPIED, OccupancyGrid, ValueMap, WorldCaptions,
                      scan_cells)
from .policy import ConfigError, NavigationAgent, PolicyConfig, SubtaskContext
from .sim_env import (FORWARD_STEP_M, TURN_RAD, Action, Observation, Pose, WorldMap, detect_visible,
                      is_success, load_scenario, raycast_scan, shortest_path_to_goal, step)
from .skeleton import NodeKind, SkeletonGraph

log = logging.getLogger(__name__)

PROVIDERS = ("cooccurrence", "oracle", "random", "remote")
BUDGET = 500

# Table-style ablation rows: name -> (map mode, planner, revisit)
ABLATIONS = {
    "semantic-map+greedy": ("semantic-map", "greedy", False),
    "value-map+greedy": ("value-map", "greedy", False),
    "ssmg+greedy": ("ssmg", "greedy", True),
    "ssmg+lhp-no-revisit": ("ssmg", "lhp", False),
    "ssmg+lhp": ("ssmg", "lhp", True),
}


class WriteError(OSError):
    pass


@dataclass(frozen=True)
class RunConfig:
    policy: PolicyConfig = PolicyConfig()
    provider: str = "cooccurrence"
    oracle_sigma: float = 0.0
    remote_url: str | None = None
    budget: int = BUDGET

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ConfigError(f"unknown provider {self.provider!r}; expected one of {PROVIDERS}")
        if self.provider == "remote" and not self.remote_url:
            raise ConfigError("remote provider needs a URL")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")

    def to_json(self) -> dict:
        return {"policy": self.policy.to_json(), "provider": self.provider,
                "oracle_sigma": self.oracle_sigma, "remote_url": self.remote_url,
                "budget": self.budget}

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        return cls(PolicyConfig(**d["policy"]), d["provider"], d["oracle_sigma"], d["remote_url"],
                   d["budget"])

    @classmethod
    def ablation(cls, name: str, **kw) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
        mode, planner, revisit = ABLATIONS[name]
        policy_kw = {k: kw.pop(k) for k in list(kw) if k in PolicyConfig.__dataclass_fields__}
        return cls(PolicyConfig(map_mode=mode, planner=planner, revisit=revisit, **policy_kw), **kw)


def make_provider(config: RunConfig, world: WorldMap, seed: int):
    if config.provider == "cooccurrence":
        return CooccurrenceProvider()
    if config.provider == "oracle":
        return OracleProvider(world, config.oracle_sigma, seed=seed)
    if config.provider == "random":
        return RandomProvider(seed)
    return RemoteProvider(config.remote_url)


class ObservationCache:
    """Memoizes sensing per pose; simulation is deterministic, so this is exact."""

    def __init__(self, world: WorldMap):
        self.world = world
        self._obs: dict[tuple, tuple] = {}
        self._cells: dict[tuple, tuple] = {}

    @staticmethod
    def key(pose: Pose) -> tuple:
        return (round(pose.x, 9), round(pose.y, 9), round(pose.heading, 9))

    def observe(self, pose: Pose, step_index: int = 0, collision: bool = False,
                bump_cell=None) -> Observation:
        k = self.key(pose)
        hit = self._obs.get(k)
        if hit is None:
            trace: list = []
            scan = raycast_scan(self.world, pose, trace=trace)
            hit = (scan, detect_visible(self.world, pose, scan))
            self._obs[k] = hit
            self._cells[k] = _cells_from_trace(scan, trace)
        return Observation(pose, hit[0], hit[1], step_index, collision, bump_cell)

    def cells(self, obs: Observation):
        """Free and occupied cells of ``obs``; equals :func:`scan_cells` on the same scan."""
        k = self.key(obs.pose)
        hit = self._cells.get(k)
        if hit is None or self._obs[k][0] is not obs.scan:
            hit = scan_cells(obs, self.world.resolution, self.world.occupied.shape)
        return hit

    def step(self, pose: Pose, action: Action, step_index: int) -> tuple[Pose, Observation]:
        return step(self.world, pose, action, step_index, observer=self.observe)


def _cells_from_trace(scan, trace: list) -> tuple[set, set]:
    # the sensor rays already crossed exactly the cells mapping would retrace
    free: set = set()
    occ: set = set()
    for cells, hit in zip(trace, scan.hits):
        if cells is None:
            continue
        if hit and cells:
            occ.add(cells[-1])
            cells = cells[:-1]
        free.update(cells)
    free -= occ
    return free, occ


_CACHES: dict[int, ObservationCache] = {}


def cache_for(world: WorldMap) -> ObservationCache:
    c = _CACHES.get(id(world))
    if c is None or c.world is not world:
        c = ObservationCache(world)
        _CACHES.clear()  # one live world at a time keeps memory bounded
        _CACHES[id(world)] = c
    return c


def episode_start(world: WorldMap, start: Pose, seed: int) -> Pose:
    """Seed 0 keeps the scenario start; other seeds draw a reachable cell and heading."""
    if seed == 0:
        return start
    rng = np.random.default_rng(seed)
    d = dijkstra_cells(world.free, [start.cell(world.resolution)])
    cells = np.argwhere(np.isfinite(d))
    r, c = cells[int(rng.integers(len(cells)))]
    x, y = cell_center((int(r), int(c)), world.resolution)
    heading = float(rng.integers(12)) * TURN_RAD
    if heading > math.pi:
        heading -= 2 * math.pi
    return Pose(x, y, heading)


# ----------------------------------------------------------------------------- logs

@dataclass
class SubtaskLog:
    goal: dict
    outcome: str
    steps: int
    path_taken_m: float
    shortest_m: float
    start_pose: tuple[float, float, float]
    end_pose: tuple[float, float, float]
    trace: list[list] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    @property
    def spl(self) -> float:
        if not self.success:
            return 0.0
        denom = max(self.shortest_m, self.path_taken_m)
        return 1.0 if denom <= 0 else self.shortest_m / denom


@dataclass
class EpisodeLog:
    scenario: str
    seed: int
    config: dict
    subtasks: list[SubtaskLog] = field(default_factory=list)
    valid: bool = True
    error: str = ""

    def to_lines(self) -> list[str]:
        head = {"type": "episode", "scenario": self.scenario, "seed": self.seed,
                "config": self.config, "valid": self.valid, "error": self.error,
                "n_subtasks": len(self.subtasks)}
        lines = [json.dumps(head, sort_keys=True)]
        for i, st in enumerate(self.subtasks):
            d = asdict(st)
            d["type"] = "subtask"
            d["index"] = i
            lines.append(json.dumps(d, sort_keys=True))
        return lines

    def to_bytes(self) -> bytes:
        return ("\n".join(self.to_lines()) + "\n").encode()

    @classmethod
    def from_lines(cls, lines: list[str]) -> "EpisodeLog":
        docs = [json.loads(ln) for ln in lines if ln.strip()]
        head = docs[0]
        subs = []
        for d in docs[1:]:
            d = {k: v for k, v in d.items() if k not in ("type", "index")}
            d["start_pose"] = tuple(d["start_pose"])
            d["end_pose"] = tuple(d["end_pose"])
            subs.append(SubtaskLog(**d))
        return cls(head["scenario"], head["seed"], head["config"], subs, head["valid"],
                   head["error"])


def run_episode(world: WorldMap, start: Pose, goals: list[GoalSpec], config: RunConfig,
                seed: int = 0, scenario_id: str | None = None,
                agent_hook=None) -> EpisodeLog:
    """Run all subtasks in order with one persistent agent."""
    name = scenario_id or world.name
    log_ = EpisodeLog(name, seed, config.to_json())
    sim = cache_for(world)
    captions = WorldCaptions(world)
    agent = NavigationAgent(world.occupied.shape, world.resolution, config.policy,
                            make_provider(config, world, seed), CooccurrenceRelevance(captions),
                            captions, cells_fn=sim.cells)
    pose = episode_start(world, start, seed)
    step_index = 0
    obs = sim.observe(pose, step_index)
    try:
        for goal in goals:
            shortest = shortest_path_to_goal(world, pose, goal)
            ctx = SubtaskContext(goal, config.budget)
            agent.start_subtask(goal)
            begin, t0, forward = pose, len(agent.trace), 0
            while ctx.budget > 0:
                action = agent.act(obs)
                ctx.spend()
                if action is Action.STOP:
                    break
                step_index += 1
                new_pose, obs = sim.step(pose, action, step_index)
                if action is Action.FORWARD and not obs.collision:
                    forward += 1
                pose = new_pose
            ctx.finish(is_success(world, pose, goal))
            trace = [[t.step, t.stage, t.action, [round(v, 6) for v in t.pose], t.detail]
                     for t in agent.trace[t0:]]
            log_.subtasks.append(SubtaskLog(goal.to_json(), ctx.outcome, config.budget - ctx.budget,
                                            forward * FORWARD_STEP_M, shortest,
                                            (begin.x, begin.y, begin.heading),
                                            (pose.x, pose.y, pose.heading), trace))
            if agent_hook is not None:
                agent_hook(agent, len(log_.subtasks) - 1)
    except Exception as exc:  # partial log, flagged
        log.exception("episode %s seed %d aborted", name, seed)
        log_.valid = False
        log_.error = f"{type(exc).__name__}: {exc}"
    return log_


def run_scenario_file(path: str | Path, config: RunConfig, seed: int = 0) -> EpisodeLog:
    world, start, goals = load_scenario(path)
    return run_episode(world, start, goals, config, seed, Path(path).stem)


# ----------------------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    sr: float
    s_sr: float
    e_sr: float
    spl: float
    n_episodes: int
    n_subtasks: int
    per_scenario: dict[str, dict[str, float]] = field(default_factory=dict)
    spl_by_index: list[float] = field(default_factory=list)
    sr_by_index: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _summary(logs: list[EpisodeLog], pooled: bool) -> dict[str, float]:
    subs = [s for lg in logs for s in lg.subtasks]
    if not subs:
        return {}
    sr = sum(s.success for s in subs) / len(subs)
    eps = [lg for lg in logs if lg.subtasks]
    fracs = [sum(s.success for s in lg.subtasks) / len(lg.subtasks) for lg in eps]
    s_sr = sr if pooled else sum(fracs) / len(fracs)
    e_sr = sum(all(s.success for s in lg.subtasks) for lg in eps) / len(eps)
    spl = sum(s.spl for s in subs) / len(subs)
    return {"sr": sr, "s_sr": s_sr, "e_sr": e_sr, "spl": spl}


def compute_metrics(logs: list[EpisodeLog], pooled: bool = False) -> MetricsReport | None:
    """SR, s-SR (per-episode fraction, then mean), e-SR and SPL; None when no subtask ran."""
    valid = [lg for lg in logs if lg.valid]
    overall = _summary(valid, pooled)
    if not overall:
        return None
    per = {}
    for name in sorted({lg.scenario for lg in valid}):
        s = _summary([lg for lg in valid if lg.scenario == name], pooled)
        if s:
            per[name] = s
    depth = max(len(lg.subtasks) for lg in valid)
    spl_idx, sr_idx = [], []
    for i in range(depth):
        col = [lg.subtasks[i] for lg in valid if len(lg.subtasks) > i]
        spl_idx.append(sum(s.spl for s in col) / len(col))
        sr_idx.append(sum(s.success for s in col) / len(col))
    return MetricsReport(overall["sr"], overall["s_sr"], overall["e_sr"], overall["spl"],
                         len([lg for lg in valid if lg.subtasks]),
                         sum(len(lg.subtasks) for lg in valid), per, spl_idx, sr_idx)


# ----------------------------------------------------------------------------- suite

@dataclass
class Manifest:
    scenarios: list[Path]
    seeds: list[int]

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        d = json.loads(path.read_text())
        return cls([path.parent / s for s in d["scenarios"]], [int(s) for s in d["seeds"]])


def run_suite(manifest: Manifest, configs: dict[str, RunConfig],
              keep_logs: bool = False) -> dict[str, MetricsReport | list]:
    """One report per named configuration over every (scenario, seed) pair."""
    loaded = [(p.stem, *load_scenario(p)) for p in manifest.scenarios]
    out: dict = {}
    logs_by: dict[str, list[EpisodeLog]] = {name: [] for name in configs}
    for sid, world, start, goals in loaded:
        for name, cfg in configs.items():
            for seed in manifest.seeds:
                logs_by[name].append(run_episode(world, start, goals, cfg, seed, sid))
    for name in configs:
        out[name] = compute_metrics(logs_by[name])
        if keep_logs:
            out[name + ":logs"] = logs_by[name]
    return out


def format_report(reports: dict[str, MetricsReport]) -> str:
    rows = [f"{'config':<24} {'SR':>6} {'s-SR':>6} {'e-SR':>6} {'SPL':>6}  episodes"]
    for name, r in reports.items():
        if r is None or not isinstance(r, MetricsReport):
            continue
        rows.append(f"{name:<24} {r.sr:6.3f} {r.s_sr:6.3f} {r.e_sr:6.3f} {r.spl:6.3f}  {r.n_episodes}")
    return "\n".join(rows)


# ----------------------------------------------------------------------------- rendering

PALETTE = {
    "unknown": (40, 40, 40), "free": (235, 235, 235), "occupied": (20, 20, 120),
    "skeleton": (120, 200, 120), "endpoint": (230, 60, 60), "junction": (250, 200, 0),
    "object": (180, 0, 180), "path": (0, 140, 255), "start": (0, 200, 0),
}


def _write(path: Path, data: bytes) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from None
    return path


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def _upscale(img: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(img, k, axis=0), k, axis=1)


def occupancy_image(labels: np.ndarray) -> np.ndarray:
    rgb = np.zeros(labels.shape + (3,), np.uint8)
    rgb[:] = PALETTE["unknown"]
    rgb[labels == FREE] = PALETTE["free"]
    rgb[labels == OCCUPIED] = PALETTE["occupied"]
    return rgb


def skeleton_overlay(labels: np.ndarray, graph: SkeletonGraph | None,
                     objects: list[tuple[float, float]] = (), resolution: float = 1.0) -> np.ndarray:
    rgb = occupancy_image(labels)
    if graph is not None:
        for cell in graph.pixels():
            rgb[cell] = PALETTE["skeleton"]
        for n in graph.nodes:
            rgb[n.cell] = PALETTE["endpoint" if n.kind is NodeKind.ENDPOINT else "junction"]
    for x, y in objects:
        r, c = int(y // resolution), int(x // resolution)
        if 0 <= r < labels.shape[0] and 0 <= c < labels.shape[1]:
            rgb[r, c] = PALETTE["object"]
    return rgb


def value_image(vmap: ValueMap) -> np.ndarray:
    v = np.where(vmap.confidence > 0, vmap.value, 0.0)
    return np.clip(np.round(v * 255), 0, 255).astype(np.uint8)


def trajectory_image(world: WorldMap, log_: EpisodeLog) -> np.ndarray:
    labels = np.where(world.occupied, OCCUPIED, FREE).astype(np.int8)
    rgb = occupancy_image(labels)
    res = world.resolution
    for st in log_.subtasks:
        for rec in st.trace:
            x, y, _ = rec[3]
            r, c = int(y // res), int(x // res)
            if 0 <= r < labels.shape[0] and 0 <= c < labels.shape[1]:
                rgb[r, c] = PALETTE["path"]
    for o in world.objects:
        r, c = int(o.centroid[1] // res), int(o.centroid[0] // res)
        rgb[r, c] = PALETTE["object"]
    if log_.subtasks:
        x, y, _ = log_.subtasks[0].start_pose
        rgb[int(y // res), int(x // res)] = PALETTE["start"]
    return rgb


def render_maps(out_dir: str | Path, grid: OccupancyGrid, graph: SkeletonGraph | None,
                vmap: ValueMap | None = None, objects: list[tuple[float, float]] = (),
                scale: int = 4, prefix: str = "") -> list[Path]:
    out = Path(out_dir)
    files = [_write(out / f"{prefix}occupancy.ppm", ppm_bytes(_upscale(occupancy_image(grid.labels), scale))),
             _write(out / f"{prefix}skeleton.ppm",
                    ppm_bytes(_upscale(skeleton_overlay(grid.labels, graph, objects, grid.resolution),
                                       scale)))]
    if vmap is not None:
        files.append(_write(out / f"{prefix}value.pgm", pgm_bytes(_upscale(value_image(vmap), scale))))
    return files


def render_episode(out_dir: str | Path, world: WorldMap, log_: EpisodeLog,
                   scale: int = 4) -> list[Path]:
    out = Path(out_dir)
    taken = sum(st.path_taken_m for st in log_.subtasks)
    img = _write(out / f"{log_.scenario}_seed{log_.seed}_trajectory.ppm",
                 ppm_bytes(_upscale(trajectory_image(world, log_), scale)))
    note = _write(out / f"{log_.scenario}_seed{log_.seed}_trajectory.txt",
                  f"path_length_m {taken:.2f}\n".encode())
    return [img, note]


def replay_config(log_: EpisodeLog) -> RunConfig:
    """Configuration recorded in a log, sufficient to re-run it."""
    return RunConfig.from_json(log_.config)


def with_policy(config: RunConfig, **changes) -> RunConfig:
    return replace(config, policy=replace(config.policy, **changes))
