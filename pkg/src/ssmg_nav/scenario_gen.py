"""Deterministic apartment-style scenario generator.

Rooms come from recursive wall splits, each split wall gets one door, so the
free space is connected by construction. Objects stand against walls (their
footprint cells become obstacles) and are kept only if the free space stays
connected and a success approach exists.

    python3 -m ssmg_nav.scenario_gen --out src/ssmg_nav/scenarios
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .goals import GoalSpec, Modality
from .grid import cell_center
from .knowledge import default_table
from .sim_env import parse_scenario, success_cells

RESOLUTION = 0.25
ROOM_TYPES = ("living_room", "kitchen", "bedroom", "bathroom", "office", "hallway")
COLORS = ("red", "blue", "green", "white", "black", "grey", "yellow", "brown", "orange", "pink")
ADJECTIVES = ("small", "large", "wooden", "metal", "old", "modern", "round", "tall", "plastic",
              "striped")
WIDE = {"bed", "sofa", "dining_table", "bathtub", "wardrobe", "desk", "bookshelf"}
MIN_ROOM = 7  # interior cells per side


def _split_rooms(rng, occ, n_rooms):
    h, w = occ.shape
    rooms = [(1, 1, h - 2, w - 2)]  # inclusive interior bounds
    doors: list[tuple[int, int]] = []
    while len(rooms) < n_rooms:
        rooms.sort(key=lambda r: -(r[2] - r[0] + 1) * (r[3] - r[1] + 1))
        for k, (r0, c0, r1, c1) in enumerate(rooms):
            rh, rw = r1 - r0 + 1, c1 - c0 + 1
            vertical = rw >= rh
            span = rw if vertical else rh
            if span < 2 * MIN_ROOM + 1:
                continue
            lo, hi = MIN_ROOM, span - MIN_ROOM - 1
            ok = []
            for off in range(lo, hi + 1):
                if vertical:
                    c = c0 + off
                    ends = [(r0 - 1, c), (r1 + 1, c)]
                else:
                    r = r0 + off
                    ends = [(r, c0 - 1), (r, c1 + 1)]
                # keep new walls away from existing doorways
                if all(abs(e[0] - d[0]) + abs(e[1] - d[1]) > 2 for e in ends for d in doors):
                    ok.append(off)
            if not ok:
                continue
            off = int(rng.choice(ok))
            if vertical:
                c = c0 + off
                occ[r0:r1 + 1, c] = True
                d0 = int(rng.integers(r0 + 1, r1 - 2))
                cells = [(d0 + i, c) for i in range(3)]
                a, b = (r0, c0, r1, c - 1), (r0, c + 1, r1, c1)
            else:
                r = r0 + off
                occ[r, c0:c1 + 1] = True
                d0 = int(rng.integers(c0 + 1, c1 - 2))
                cells = [(r, d0 + i) for i in range(3)]
                a, b = (r0, c0, r - 1, c1), (r + 1, c0, r1, c1)
            for cell in cells:
                occ[cell] = False
            doors.extend(cells)
            rooms[k:k + 1] = [a, b]
            break
        else:
            break
    return rooms, doors


def _connected(free: np.ndarray) -> bool:
    _, n = ndimage.label(free, structure=np.ones((3, 3)))
    return n == 1


def generate(seed: int, name: str, height: int = 30, width: int = 40, n_rooms: int = 5,
             n_objects: int = 12, n_subtasks: int = 5) -> dict:
    rng = np.random.default_rng(seed)
    table = default_table()
    occ = np.zeros((height, width), bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    rooms, doors = _split_rooms(rng, occ, n_rooms)
    labels = list(rng.permutation(ROOM_TYPES))[:len(rooms)]
    near_door = np.zeros_like(occ)
    for d in doors:
        near_door[max(0, d[0] - 2):d[0] + 3, max(0, d[1] - 2):d[1] + 3] = True

    counts = [1] * len(rooms)
    for _ in range(n_objects - len(rooms)):
        counts[int(rng.integers(len(rooms)))] += 1
    objects = []
    used_captions: set[tuple[str, ...]] = set()
    for (r0, c0, r1, c1), room, count in zip(rooms, labels, counts):
        natives = sorted(c for c, v in table.rooms[room].items() if v >= 0.9)
        cats = list(rng.permutation(natives))
        placed = 0
        for cat in cats * 2:
            if placed >= count:
                break
            for _ in range(40):
                r = int(rng.integers(r0, r1 + 1))
                c = int(rng.integers(c0, c1 + 1))
                wall_dirs = [(dr, dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                             if occ[r + dr, c + dc]]
                if not wall_dirs or occ[r, c] or near_door[r, c]:
                    continue
                fp = [(r, c)]
                if cat in WIDE:
                    dr, dc = wall_dirs[0]
                    side = (r + dc, c + dr)  # along the wall
                    if not (r0 <= side[0] <= r1 and c0 <= side[1] <= c1) or occ[side] or near_door[side]:
                        continue
                    fp.append(side)
                trial = occ.copy()
                for cell in fp:
                    trial[cell] = True
                if not _connected(~trial):
                    continue
                cx = float(np.mean([cell_center(p, RESOLUTION)[0] for p in fp]))
                cy = float(np.mean([cell_center(p, RESOLUTION)[1] for p in fp]))
                for _ in range(20):
                    cap = (str(rng.choice(COLORS)), str(rng.choice(ADJECTIVES)), cat)
                    if cap not in used_captions:
                        break
                used_captions.add(cap)
                oid = f"{cat}_{len(objects)}"
                objects.append({"id": oid, "category": cat, "x": round(cx, 4), "y": round(cy, 4),
                                "captions": list(cap), "room": room,
                                "footprint": [list(p) for p in fp]})
                occ = trial
                placed += 1
                break

    free = np.argwhere(~occ)
    sr, sc = free[int(rng.integers(len(free)))]
    sx, sy = cell_center((int(sr), int(sc)), RESOLUTION)
    doc = {
        "name": name,
        "resolution_m": RESOLUTION,
        "grid": ["".join("#" if v else "." for v in row) for row in occ],
        "start": {"x": sx, "y": sy, "heading_deg": float(30 * int(rng.integers(12)))},
        "objects": objects,
        "subtasks": [],
    }
    world, _, _ = parse_scenario({**doc, "subtasks": []})
    reachable = [o for o in objects
                 if success_cells(world, GoalSpec(Modality.IMAGE, o["id"], o["category"], (o["id"],)))]
    order = list(rng.permutation(len(reachable)))[:n_subtasks]
    modalities = ["category", "description", "image"]
    for i, k in enumerate(order):
        o = reachable[int(k)]
        mod = modalities[(i + int(seed)) % 3]
        if mod == "category":
            doc["subtasks"].append({"modality": "category", "payload": o["category"]})
        elif mod == "description":
            words = list(o["captions"]) + ["in", "the", o["room"]]
            doc["subtasks"].append({"modality": "description", "payload": " ".join(words),
                                    "target": o["id"]})
        else:
            doc["subtasks"].append({"modality": "image", "payload": o["id"]})
    parse_scenario(doc)  # validates
    return doc


def write_suite(out: Path, n: int = 20, seeds=(0, 1, 2, 3, 4), base_seed: int = 1000) -> Path:
    suite = out / "suite"
    suite.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n):
        name = f"suite-{i:02d}"
        doc = generate(base_seed + i, name, n_rooms=4 + i % 3)
        (suite / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        names.append(f"{name}.json")
    manifest = suite / "manifest.json"
    manifest.write_text(json.dumps({"scenarios": names, "seeds": list(seeds)}, indent=1) + "\n")
    return manifest


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="generate the bundled scenarios")
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    doc = generate(7, "apartment-A")
    (args.out / "apartment-A.json").write_text(json.dumps(doc, indent=1) + "\n")
    write_suite(args.out)


if __name__ == "__main__":
    main()
