"""Rasterization of roles, scenes, reference images and shots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .palette import (
    ACCESSORIES, BACKDROP, BORDER, PATTERNS, QUADRANTS, ROLE_COLORS, SCALES, SCENE_COLORS,
    SHAPES, WHITE,
)

REF_VARIANTS = ("centered-large", "offset-small", "bordered")


@dataclass(frozen=True)
class RoleSpec:
    shape: str
    color: str
    accessory: str = "none"

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in ROLE_COLORS or self.accessory not in ACCESSORIES:
            raise ValueError(f"invalid role spec {self}")

    def descriptor(self) -> np.ndarray:
        v = np.zeros(len(SHAPES) + len(ROLE_COLORS) + len(ACCESSORIES))
        v[SHAPES.index(self.shape)] = 1
        v[len(SHAPES) + list(ROLE_COLORS).index(self.color)] = 1
        v[len(SHAPES) + len(ROLE_COLORS) + ACCESSORIES.index(self.accessory)] = 1
        return v

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "accessory": self.accessory}


def _grid(h: int, w: int, cx: float, cy: float):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5 - cx, ys + 0.5 - cy


def shape_mask(shape: str, cx: float, cy: float, radius: float, h: int, w: int) -> np.ndarray:
    dx, dy = _grid(h, w, cx, cy)
    r = radius
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"unknown shape {shape!r}")


def accessory_mask(accessory: str, cx: float, cy: float, radius: float, h: int, w: int) -> np.ndarray:
    dx, dy = _grid(h, w, cx, cy)
    d = np.sqrt(dx * dx + dy * dy)
    if accessory == "dot":
        return d <= 0.3 * radius
    if accessory == "ring":
        return (d >= 0.45 * radius) & (d <= 0.7 * radius)
    return np.zeros((h, w), dtype=bool)


def draw_role(image: np.ndarray, role: RoleSpec, cx: float, cy: float, size: float) -> np.ndarray:
    """Paint ``role`` onto ``image`` in place; returns the role's exact mask."""
    h, w = image.shape[:2]
    r = size / 2.0
    mask = shape_mask(role.shape, cx, cy, r, h, w)
    image[mask] = ROLE_COLORS[role.color]
    acc = accessory_mask(role.accessory, cx, cy, r, h, w) & mask
    image[acc] = WHITE
    return mask


def scene_background(color: str, pattern: str, size: int) -> np.ndarray:
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    bg, ink = SCENE_COLORS[color]
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = bg
    ys, xs = np.mgrid[0:size, 0:size]
    if pattern == "stripes":
        img[(xs // 2) % 3 == 0] = ink
    elif pattern == "dots":
        img[(xs % 4 == 1) & (ys % 4 == 1)] = ink
    return img


def quadrant_box(quadrant: str, size: int) -> tuple[int, int, int, int]:
    """``(y0, y1, x0, x1)`` pixel bounds of a quadrant."""
    q = size // 2
    i = QUADRANTS.index(quadrant)
    y0, x0 = (i // 2) * q, (i % 2) * q
    return y0, y0 + q, x0, x0 + q


def placement_geometry(quadrant: str, scale: str, size: int) -> tuple[float, float, float]:
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}")
    y0, y1, x0, x1 = quadrant_box(quadrant, size)
    q = y1 - y0
    diameter = round((0.8 if scale == "large" else 0.5) * q)
    return x0 + q // 2 + 0.5, y0 + q // 2 + 0.5, float(diameter)


def render_shot(scene: tuple[str, str], placements: dict, roles: list[RoleSpec], size: int):
    """Render one shot; ``placements`` maps role index -> (quadrant, scale).

    Returns the image and ``{role index: mask}``.
    """
    img = scene_background(scene[0], scene[1], size)
    masks = {}
    for k in sorted(placements):
        quadrant, scale = placements[k]
        cx, cy, d = placement_geometry(quadrant, scale, size)
        masks[k] = draw_role(img, roles[k], cx, cy, d)
    return img, masks


def reference_geometry(variant: str, size: int) -> tuple[float, float, float]:
    if variant == "centered-large":
        return size // 2 + 0.5, size // 2 + 0.5, float(round(0.6 * size))
    if variant == "offset-small":
        return size // 3 + 0.5, (2 * size) // 3 + 0.5, float(round(0.35 * size))
    if variant == "bordered":
        return size // 2 + 0.5, size // 2 + 0.5, float(round(0.45 * size))
    raise ValueError(f"unknown reference variant {variant!r}")


def render_reference(role: RoleSpec, variant: str, size: int = 48):
    """Reference image of a single role on a neutral backdrop, plus its mask."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKDROP
    if variant == "bordered":
        b = max(1, size // 24)
        img[:b] = BORDER
        img[-b:] = BORDER
        img[:, :b] = BORDER
        img[:, -b:] = BORDER
    cx, cy, d = reference_geometry(variant, size)
    mask = draw_role(img, role, cx, cy, d)
    return img, mask
