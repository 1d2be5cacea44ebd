"""Axis-aligned integer pixel rectangles.

Boxes use half-open extents: (x0, y0) inclusive, (x1, y1) exclusive, so
width == x1 - x0 and two boxes sharing an edge coordinate do not overlap.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, other: "Box") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def contains_point(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def intersects(self, other: "Box") -> bool:
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x0 and 0 <= self.y0 and self.x1 <= width and self.y1 <= height

    def translated(self, dx: int, dy: int) -> "Box":
        return Box(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def scaled(self, factor: float) -> "Box":
        """Scale coordinates by a common factor, rounding half up.

        Monotone rounding of the shared coordinate keeps disjoint boxes
        disjoint; degenerate results are widened to one pixel.
        """
        def r(v: float) -> int:
            return int(v * factor + 0.5)

        x0, y0, x1, y1 = r(self.x0), r(self.y0), r(self.x1), r(self.y1)
        if x1 <= x0:
            x1 = x0 + 1
        if y1 <= y0:
            y1 = y0 + 1
        return Box(x0, y0, x1, y1)

    def clipped(self, width: int, height: int) -> "Box":
        return Box(
            max(0, min(self.x0, width - 1)),
            max(0, min(self.y0, height - 1)),
            min(width, max(self.x1, self.x0 + 1)),
            min(height, max(self.y1, self.y0 + 1)),
        )

    @staticmethod
    def from_tuple(t) -> "Box":
        x0, y0, x1, y1 = (int(v) for v in t)
        return Box(x0, y0, x1, y1)

    def downscaled(self, factor: int) -> "Box":
        """Cover of the box on a grid coarsened by an integer factor."""
        return Box(
            self.x0 // factor,
            self.y0 // factor,
            max(self.x0 // factor + 1, -(-self.x1 // factor)),
            max(self.y0 // factor + 1, -(-self.y1 // factor)),
        )
