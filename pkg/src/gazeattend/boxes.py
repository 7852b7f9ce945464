"""Box and detection records shared by the dataset, boxfit and evaluation code.

Boxes use pixel coordinates: ``(x, y)`` is the top-left pixel (inclusive) and
``(x + w, y + h)`` the exclusive bottom-right corner.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box must have w, h >= 1, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px < self.x + self.w and self.y <= py < self.y + self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def as_list(self) -> list[int]:
        return [int(self.x), int(self.y), int(self.w), int(self.h)]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        x, y, w, h = (int(v) for v in values)
        return cls(x, y, w, h)


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def to_json(self) -> dict:
        return {"class": int(self.class_id), "box": self.box.as_list(), "score": float(self.score)}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(int(obj["class"]), BoundingBox.from_list(obj["box"]), float(obj["score"]))
