from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field


class Modality(str, enum.Enum):
    CATEGORY = "category"
    DESCRIPTION = "description"
    IMAGE = "image"


@dataclass(frozen=True)
class GoalSpec:
    """A subtask target.

    ``payload`` is a category string, a tuple of description tokens, or a
    ground-truth instance id (image goals). ``category_hint`` is the object
    class visible in a goal image; ``target_ids`` are the ground-truth
    instances that count as success and are only read by the evaluator and
    by oracle-style providers.
    """

    modality: Modality
    payload: str | tuple[str, ...]
    category_hint: str | None = None
    target_ids: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if self.modality is Modality.DESCRIPTION:
            if not isinstance(self.payload, tuple) or not self.payload:
                raise ValueError("description goal needs a non-empty token tuple")
        elif not isinstance(self.payload, str) or not self.payload:
            raise ValueError(f"{self.modality.value} goal needs a non-empty string payload")

    @property
    def tokens(self) -> frozenset[str]:
        if isinstance(self.payload, tuple):
            return frozenset(self.payload)
        return frozenset([self.payload])

    def render(self) -> str:
        if self.modality is Modality.CATEGORY:
            return str(self.payload)
        if self.modality is Modality.DESCRIPTION:
            return " ".join(self.payload)
        hint = f" ({self.category_hint})" if self.category_hint else ""
        return f"image:{self.payload}{hint}"

    @property
    def key(self) -> str:
        """Stable short hash used to key goal-conditioned caches."""
        text = f"{self.modality.value}|{self.render()}"
        return hashlib.sha1(text.encode()).hexdigest()[:12]

    def to_json(self) -> dict:
        payload = list(self.payload) if isinstance(self.payload, tuple) else self.payload
        out = {"modality": self.modality.value, "payload": payload}
        if self.category_hint:
            out["category_hint"] = self.category_hint
        if self.target_ids:
            out["target_ids"] = list(self.target_ids)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "GoalSpec":
        payload = data["payload"]
        if isinstance(payload, list):
            payload = tuple(payload)
        return cls(Modality(data["modality"]), payload, data.get("category_hint"),
                   tuple(data.get("target_ids", ())))


def tokenize(text: str | list[str] | tuple[str, ...]) -> tuple[str, ...]:
    if isinstance(text, str):
        words = text.lower().replace(",", " ").split()
    else:
        words = [str(t).lower() for t in text]
    return tuple(w for w in words if w)
