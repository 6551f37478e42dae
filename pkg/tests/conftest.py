from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssmg_nav.sim_env import WorldMap, parse_scenario  # noqa: E402

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "ssmg_nav" / "scenarios"


def room_doc(rows, objects=(), subtasks=(), start=(1.125, 1.125, 0.0), res=0.25):
    return {"name": "t", "resolution_m": res, "grid": list(rows),
            "start": {"x": start[0], "y": start[1], "heading_deg": start[2]},
            "objects": list(objects), "subtasks": list(subtasks)}


def box_rows(h, w):
    rows = []
    for r in range(h):
        if r in (0, h - 1):
            rows.append("#" * w)
        else:
            rows.append("#" + "." * (w - 2) + "#")
    return rows


@pytest.fixture
def open_world() -> WorldMap:
    world, _, _ = parse_scenario(room_doc(box_rows(20, 20)))
    return world


@pytest.fixture
def apartment_path() -> Path:
    return SCENARIOS / "apartment-A.json"


@pytest.fixture
def suite_manifest() -> Path:
    return SCENARIOS / "suite" / "manifest.json"


ACCEPTANCE: dict[int, str] = {}  # criterion number -> pass/fail line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
