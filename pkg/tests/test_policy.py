from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SCENARIOS, box_rows, room_doc
from oracles import plus_fixture
from ssmg_nav.belief import CooccurrenceProvider, ProviderFailure
from ssmg_nav.goals import GoalSpec, Modality
from ssmg_nav.grid import cell_center
from ssmg_nav.harness import ABLATIONS, RunConfig, run_episode
from ssmg_nav.mapping import FREE, OCCUPIED, CooccurrenceRelevance, ObjectRecord, View, WorldCaptions
from ssmg_nav.policy import (SPIN_TURNS, ConfigError, NavigationAgent, PolicyConfig, PolicyState,
                             RevisitPayload, Stage, SubtaskContext, WaypointPayload)
from ssmg_nav.sim_env import (TURN_RAD, Action, Pose, WorldMap, load_scenario, observe,
                              parse_scenario, wrap_angle)

RES = 0.25


class Fixed:
    """Provider stub with a constant belief."""

    name = "fixed"

    def __init__(self, value):
        self.value = value
        self.calls = 0

    def evaluate(self, artifact):
        self.calls += 1
        if self.value is None:
            raise ProviderFailure(artifact.node_id, "down")
        return self.value


def make_agent(world, config=PolicyConfig(), provider=None):
    captions = WorldCaptions(world)
    return NavigationAgent(world.occupied.shape, world.resolution, config,
                           provider or CooccurrenceProvider(), CooccurrenceRelevance(captions),
                           captions)


def know_everything(agent, world):
    agent.grid.labels[:] = np.where(world.occupied, OCCUPIED, FREE)
    agent.map_views = SPIN_TURNS


def padded(mask):
    return WorldMap(RES, ~np.pad(mask, 1), [], "fixture")


def h_fixture():
    m = np.zeros((21, 21), bool)
    m[:, 3:6] = True
    m[:, 15:18] = True
    m[9:12, 3:18] = True
    return m


def record(rid, cat, x, y):
    cell = (int(y // RES), int(x // RES))
    return ObjectRecord(rid, cat, frozenset({cell}), (x, y), [View(Pose(x, y), cat, 0.5)])


TWO_OBJECTS = room_doc(
    box_rows(20, 20),
    objects=[{"id": "sofa_0", "category": "sofa", "x": 3.625, "y": 2.125, "captions": ["sofa"],
              "room": "living_room"},
             {"id": "tv_0", "category": "tv", "x": 3.625, "y": 3.125, "captions": ["tv"],
              "room": "living_room"}],
    subtasks=[{"modality": "category", "payload": "sofa"}, {"modality": "category", "payload": "tv"}],
    start=(1.125, 2.625, 0.0))


# ----------------------------------------------------------------------------- configuration

@pytest.mark.parametrize("kw", [dict(map_mode="grid"), dict(planner="astar"), dict(tau=0.0),
                                dict(verify_threshold=1.5)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        PolicyConfig(**kw)


def test_state_payload_must_match_stage():
    with pytest.raises(AssertionError):
        PolicyState(Stage.REVISITING).check()
    PolicyState(Stage.WAYPOINT, WaypointPayload("x", Stage.EXPLORING)).check()


def test_subtask_context_budget_and_outcome():
    ctx = SubtaskContext(GoalSpec(Modality.CATEGORY, "sofa"), budget=1)
    ctx.spend()
    with pytest.raises(RuntimeError):
        ctx.spend()
    ctx.finish(False)
    with pytest.raises(RuntimeError):
        ctx.finish(True)


# ----------------------------------------------------------------------------- retrieval tree

def test_fresh_world_goes_exploring():
    world, start, goals = parse_scenario(TWO_OBJECTS)
    agent = make_agent(world)
    agent.start_subtask(GoalSpec(Modality.CATEGORY, "bed"))
    agent.act(observe(world, start))
    assert agent.state.stage is Stage.EXPLORING


def test_blank_map_looks_around_before_giving_up():
    world = padded(plus_fixture())
    agent = make_agent(world, PolicyConfig(revisit=False))
    agent.start_subtask(GoalSpec(Modality.CATEGORY, "bed"))
    assert agent._retrieve() is Action.TURN_LEFT and agent.note == "look around"
    agent.map_views = SPIN_TURNS
    assert agent._retrieve() is Action.STOP and agent.state.stage is Stage.DONE


def test_explored_world_without_goal_goes_revisiting():
    world = padded(plus_fixture())
    agent = make_agent(world)
    agent.start_subtask(GoalSpec(Modality.CATEGORY, "bed"))
    know_everything(agent, world)
    agent.act(observe(world, Pose(*cell_center((8, 8), RES))))
    assert agent.state.stage is Stage.REVISITING
    stops = [nid for nid, _ in agent.state.payload.stops]
    ssmg = agent.current_ssmg()
    assert sorted(stops) == sorted(ssmg.nodes)
    assert stops[0] == ssmg.junctions[0].node_id


def test_junction_endpoints_visited_before_next_junction():
    world = padded(h_fixture())
    agent = make_agent(world)
    agent.start_subtask(GoalSpec(Modality.CATEGORY, "bed"))
    know_everything(agent, world)
    agent._pose = Pose(*cell_center((11, 5), RES))
    stops = [nid for nid, _ in agent._revisit_plan()]
    ssmg = agent.current_ssmg()
    assert len(ssmg.junctions) == 2
    seen: set[int] = set()
    i = 0
    while i < len(stops):
        nid = stops[i]
        seen.add(nid)
        i += 1
        if ssmg.nodes[nid].kind.value == "junction":
            ends = [e for e in ssmg.adjacent_endpoints(nid) if e not in seen]
            assert sorted(stops[i:i + len(ends)]) == sorted(ends)
            seen.update(ends)
            i += len(ends)


def test_spin_is_exactly_twelve_left_turns():
    world = padded(plus_fixture())
    agent = make_agent(world)
    agent.start_subtask(GoalSpec(Modality.CATEGORY, "bed"))
    know_everything(agent, world)
    pose = Pose(*cell_center((8, 8), RES))
    agent.state = PolicyState(Stage.REVISITING, RevisitPayload([(0, (8, 8))]))
    acts = [agent._revisit_step(pose) for _ in range(SPIN_TURNS)]
    assert acts == [Action.TURN_LEFT] * SPIN_TURNS
    assert agent._revisit_step(pose) is None and agent.state.stage is Stage.RETRIEVAL


def test_target_seen_mid_spin_switches_to_waypoint():
    world, _, goals = parse_scenario(TWO_OBJECTS)
    agent = make_agent(world)
    agent.start_subtask(goals[0])
    pose = Pose(1.125, 2.625, 0.0)
    agent.state = PolicyState(Stage.REVISITING, RevisitPayload([(0, pose.cell(RES))], spin_left=6))
    agent.act(observe(world, pose))
    assert agent.state.stage is Stage.WAYPOINT
    assert agent.state.payload.instance_id == "sofa_0"
    assert agent.state.payload.return_stage is Stage.REVISITING


def test_memory_reuse_gives_immediate_waypoint():
    world, start, goals = parse_scenario(TWO_OBJECTS)
    log_ = run_episode(world, start, goals, RunConfig(), 0)
    first, second = log_.subtasks
    assert first.success and second.success
    assert any(t[1] == "waypoint_nav" for t in first.trace)
    assert second.trace[0][1] == "waypoint_nav"


# ----------------------------------------------------------------------------- verification

def verify_setup(goal, provider, mode="semantic-map"):
    world, _, _ = parse_scenario(TWO_OBJECTS)
    agent = make_agent(world, PolicyConfig(map_mode=mode), provider)
    agent.start_subtask(goal)
    agent.omap.records["sofa_0"] = record("sofa_0", "sofa", 3.625, 2.125)
    return agent


def test_low_belief_category_match_rejected():
    agent = verify_setup(GoalSpec(Modality.CATEGORY, "sofa"), Fixed(0.3))
    assert not agent.verify_candidate("sofa_0")


def test_high_belief_description_accepted():
    goal = GoalSpec(Modality.DESCRIPTION, ("sofa",))
    agent = verify_setup(goal, Fixed(0.8))
    assert agent.verify_candidate("sofa_0")


def test_threshold_is_inclusive():
    assert verify_setup(GoalSpec(Modality.CATEGORY, "sofa"), Fixed(0.6)).verify_candidate("sofa_0")


def test_provider_failure_rejects():
    assert not verify_setup(GoalSpec(Modality.CATEGORY, "sofa"), Fixed(None)).verify_candidate("sofa_0")


def test_image_goal_uses_id_equality():
    prov = Fixed(None)
    agent = verify_setup(GoalSpec(Modality.IMAGE, "sofa_0", "sofa"), prov)
    assert agent.verify_candidate("sofa_0")
    agent.omap.records["sofa_1"] = record("sofa_1", "sofa", 3.625, 3.625)
    assert not agent.verify_candidate("sofa_1")
    assert prov.calls == 0


# ----------------------------------------------------------------------------- exploring and control

def open_agent(h=10, w=40, config=PolicyConfig()):
    world = WorldMap(RES, np.zeros((h, w), bool))
    agent = make_agent(world, config)
    agent.start_subtask(GoalSpec(Modality.CATEGORY, "bed"))
    agent.grid.labels[:] = FREE
    return agent


@pytest.mark.parametrize("planner", ["lhp", "greedy"])
def test_closer_of_two_equal_frontiers_first(planner):
    agent = open_agent(config=PolicyConfig(planner=planner))
    pose = Pose(*cell_center((5, 12), RES))
    near, far = (5, 16), (5, 0)  # 1 m and 3 m
    target, unreachable, _ = agent.choose_frontier(pose, [far, near])
    assert target == near and unreachable == []


def test_single_frontier_is_the_plan():
    agent = open_agent()
    target, _, _ = agent.choose_frontier(Pose(*cell_center((5, 12), RES)), [(2, 30)])
    assert target == (2, 30)


def test_controller_forward_when_aligned():
    agent = open_agent()
    path = [(5, c) for c in range(12, 24)]
    assert agent._drive(path, Pose(*cell_center((5, 12), RES), 0.0)) is Action.FORWARD


@pytest.mark.parametrize("heading", [math.pi / 2, -math.pi / 2, math.pi * 0.9])
def test_controller_turns_to_reduce_bearing_error(heading):
    agent = open_agent()
    path = [(5, c) for c in range(12, 24)]
    pose = Pose(*cell_center((5, 12), RES), heading)
    act = agent._drive(path, pose)
    assert act in (Action.TURN_LEFT, Action.TURN_RIGHT)
    turned = heading + (TURN_RAD if act is Action.TURN_LEFT else -TURN_RAD)
    assert abs(wrap_angle(turned)) < abs(wrap_angle(heading))


# ----------------------------------------------------------------------------- episodes

def test_budget_exhaustion_fails_and_moves_on(apartment_path):
    world, start, goals = load_scenario(apartment_path)
    log_ = run_episode(world, start, goals, RunConfig(budget=3), 0)
    assert len(log_.subtasks) == 5
    assert all(st.outcome == "failure" and st.steps == 3 for st in log_.subtasks)


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 50), st.sampled_from(sorted(ABLATIONS)),
       st.sampled_from(["cooccurrence", "random"]))
def test_liveness_and_memory_monotonicity(seed, ablation, provider):
    world, start, goals = load_scenario(SCENARIOS / "apartment-A.json")
    sizes = []
    log_ = run_episode(world, start, goals, RunConfig.ablation(ablation, provider=provider, budget=60),
                       seed, agent_hook=lambda a, i: sizes.append(len(a.omap)))
    assert log_.valid
    stages = {s.value for s in Stage}
    for st_ in log_.subtasks:
        assert 1 <= st_.steps <= 60
        assert len(st_.trace) == st_.steps  # one action per step
        assert all(t[1] in stages and t[2] in {a.value for a in Action} for t in st_.trace)
    if RunConfig.ablation(ablation).policy.keeps_memory:
        assert sizes == sorted(sizes)
