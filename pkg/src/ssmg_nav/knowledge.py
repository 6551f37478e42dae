"""Commonsense co-occurrence tables shared by relevance scoring and belief providers."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from .goals import GoalSpec, Modality

FLOOR = 0.1


class UnknownCategory(KeyError):
    pass


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


class AffinityTable:
    """Symmetric category-category affinity plus room-category affinity, all in [0, 1]."""

    def __init__(self, categories, pairs: dict[str, float], rooms: dict[str, dict[str, float]],
                 floor: float = FLOOR, object_weight: float = 0.7, room_weight: float = 0.3):
        self.categories = frozenset(categories)
        self.pairs = {tuple(sorted(k.split("|"))): float(v) for k, v in pairs.items()}
        self.rooms = {r: dict(v) for r, v in rooms.items()}
        self.floor = floor
        self.object_weight = object_weight
        self.room_weight = room_weight

    @classmethod
    def from_json(cls, data: dict) -> "AffinityTable":
        return cls(data["categories"], data["pairs"], data["rooms"], data.get("floor", FLOOR),
                   data.get("object_weight", 0.7), data.get("room_weight", 0.3))

    def knows(self, category: str) -> bool:
        return category in self.categories

    def category(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        return self.pairs.get((min(a, b), max(a, b)), 0.0)

    def room(self, room: str | None, category: str) -> float:
        if not room:
            return 0.0
        return self.rooms.get(room, {}).get(category, 0.0)

    def goal_category(self, goal: GoalSpec) -> str:
        """Object class the goal refers to; raises UnknownCategory when none is known."""
        if goal.modality is Modality.CATEGORY:
            cat = str(goal.payload)
        elif goal.modality is Modality.IMAGE:
            cat = goal.category_hint or ""
        else:
            cat = next((t for t in goal.payload if t in self.categories), "")
        if not self.knows(cat):
            raise UnknownCategory(cat or goal.render())
        return cat

    def object_score(self, category: str, room: str | None, tokens: frozenset[str],
                     goal: GoalSpec, instance_id: str | None = None) -> float:
        """How strongly one object suggests the goal is nearby."""
        try:
            target = self.goal_category(goal)
        except UnknownCategory:
            return self.floor
        aff = self.category(category, target)
        if goal.modality is Modality.DESCRIPTION and category == target:
            overlap = jaccard(tokens | {category}, goal.tokens)
            aff *= min(1.0, 2.0 * overlap)
        elif goal.modality is Modality.IMAGE and instance_id == goal.payload:
            aff = 1.0
        blended = self.object_weight * aff + self.room_weight * self.room(room, target)
        return max(self.floor, aff, blended)


@lru_cache(maxsize=1)
def default_table() -> AffinityTable:
    text = resources.files("ssmg_nav.data").joinpath("affinity.json").read_text()
    return AffinityTable.from_json(json.loads(text))
