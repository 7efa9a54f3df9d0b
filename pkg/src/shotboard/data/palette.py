"""Closed-world colors, shapes and layout constants for synthetic storyboards."""

from __future__ import annotations

import numpy as np

SHAPES = ("circle", "square", "triangle", "diamond")
ACCESSORIES = ("none", "dot", "ring")
QUADRANTS = ("topleft", "topright", "bottomleft", "bottomright")
SCALES = ("small", "large")
PATTERNS = ("plain", "stripes", "dots")

ROLE_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 40),
    "magenta": (215, 50, 200),
    "cyan": (50, 205, 215),
    "orange": (245, 135, 25),
    "purple": (125, 45, 165),
}

# scene color -> (background, pattern ink)
SCENE_COLORS = {
    "gray": ((128, 128, 128), (95, 95, 95)),
    "tan": ((200, 175, 135), (165, 140, 100)),
    "slate": ((60, 85, 115), (35, 55, 80)),
    "brown": ((115, 75, 45), (80, 50, 30)),
}

WHITE = (255, 255, 255)
BACKDROP = (190, 190, 190)
BORDER = (25, 25, 25)
VOID = (0, 0, 0)

# kinds used by the oracle when snapping pixels to the nearest known color
KNOWN = (
    [(name, rgb, "role") for name, rgb in ROLE_COLORS.items()]
    + [("white", WHITE, "white")]
    + [(name, bg, "scene") for name, (bg, _) in SCENE_COLORS.items()]
    + [(name, ink, "pattern") for name, (_, ink) in SCENE_COLORS.items()]
    + [("backdrop", BACKDROP, "backdrop"), ("border", BORDER, "border"), ("void", VOID, "void")]
)
KNOWN_RGB = np.array([rgb for _, rgb, _ in KNOWN], dtype=np.float32)
KNOWN_NAME = [name for name, _, _ in KNOWN]
KNOWN_KIND = np.array([kind for _, _, kind in KNOWN])


def snap(image: np.ndarray) -> np.ndarray:
    """Index of the nearest known color for every pixel of an ``H×W×3`` image.

    Accepts uint8 or float images in ``[0, 1]``.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(img, 0.0, 1.0) * 255.0
    px = img.reshape(-1, 3).astype(np.float32)
    d = ((px[:, None, :] - KNOWN_RGB[None, :, :]) ** 2).sum(-1)
    return d.argmin(-1).reshape(img.shape[:2])
