"""Axis-aligned bounding boxes in image-pixel coordinates.

Coordinates follow image convention: x grows rightward (columns), y grows
downward (rows). A box is half-open in neither axis; (x_min, y_min) is the
top-left corner and (x_max, y_max) the bottom-right one.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import GeometryError


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = -1
    score: float = 0.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"degenerate box: ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def dilated(self, factor: float) -> "BoundingBox":
        """Box grown by `factor` of its own width/height on each side."""
        dx = factor * self.width
        dy = factor * self.height
        return BoundingBox(
            self.x_min - dx, self.y_min - dy, self.x_max + dx, self.y_max + dy,
            class_id=self.class_id, score=self.score,
        )
