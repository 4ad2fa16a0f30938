"""Normalized center-format bounding boxes and coordinate conversions."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates, center format.

    (cx, cy) is the box center, (w, h) its extent; all values relative to
    the image so cx, cy lie in [0, 1] and w, h in (0, 1].
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"box size ({self.w}, {self.h}) outside (0, 1]")

    def to_corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) in normalized coordinates."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def to_pixel_corners(self, image_w: float, image_h: float) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = self.to_corners()
        return (x1 * image_w, y1 * image_h, x2 * image_w, y2 * image_h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_pixel_corners(
        cls, x1: float, y1: float, x2: float, y2: float, image_w: float, image_h: float
    ) -> "BoundingBox":
        """Normalize a pixel-space corner box against the image dimensions."""
        if image_w <= 0 or image_h <= 0:
            raise ValidationError(f"image dimensions ({image_w}, {image_h}) must be positive")
        return cls.from_corners(x1 / image_w, y1 / image_h, x2 / image_w, y2 / image_h)


def clamp_box(cx: float, cy: float, w: float, h: float, min_size: float = 1e-6) -> BoundingBox:
    """Clamp raw coordinates into the valid range before constructing a box."""
    return BoundingBox(
        min(max(cx, 0.0), 1.0),
        min(max(cy, 0.0), 1.0),
        min(max(w, min_size), 1.0),
        min(max(h, min_size), 1.0),
    )
