"""Ground-truth feature extraction from rendered (or generated) images.

Pixels are snapped to the closed-world palette first, so extraction is exact
on clean renders and degrades gracefully on noisy model outputs.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .palette import KNOWN_KIND, KNOWN_NAME, QUADRANTS, SCENE_COLORS, SHAPES, snap
from .render import RoleSpec, quadrant_box, shape_mask

MIN_ROLE_PIXELS = 4

_IS_ROLE = KNOWN_KIND == "role"
_IS_FIGURE = _IS_ROLE | (KNOWN_KIND == "white")
_IS_WHITE = KNOWN_KIND == "white"


def _region_mask(shape_hw, region) -> np.ndarray:
    if region is None:
        return np.ones(shape_hw, dtype=bool)
    if isinstance(region, str):
        y0, y1, x0, x1 = quadrant_box(region, shape_hw[0])
        m = np.zeros(shape_hw, dtype=bool)
        m[y0:y1, x0:x1] = True
        return m
    return np.asarray(region, dtype=bool)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _match_shape(figure: np.ndarray):
    """Best-IoU template over shapes, centred on the figure's bounding box."""
    ys, xs = np.nonzero(figure)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    half = max(x1 - x0, y1 - y0) / 2.0
    h, w = figure.shape
    best = (-1.0, SHAPES[0], cx, cy, half)
    for r in (half - 0.5, half, half + 0.5):
        if r <= 0:
            continue
        for shape in SHAPES:
            t = shape_mask(shape, cx, cy, r, h, w)
            iou = (t & figure).sum() / max(1, (t | figure).sum())
            if iou > best[0] + 1e-12:
                best = (iou, shape, cx, cy, r)
    return best


def oracle_extract_role_feature(image: np.ndarray, region=None) -> RoleSpec | None:
    """Recover the role drawn in ``region`` (mask, quadrant name, or whole image).

    Returns ``None`` when the region holds no role.
    """
    idx = snap(image)
    inside = _region_mask(idx.shape, region)
    role_px = _IS_ROLE[idx] & inside
    if role_px.sum() < MIN_ROLE_PIXELS:
        return None
    figure = _largest_component(_IS_FIGURE[idx] & inside)
    body = figure & _IS_ROLE[idx]
    if body.sum() < MIN_ROLE_PIXELS:
        return None
    colors = np.bincount(idx[body], minlength=len(KNOWN_NAME))
    color = KNOWN_NAME[int(np.argmax(colors))]

    _, shape, cx, cy, r = _match_shape(figure)
    white = figure & _IS_WHITE[idx]
    centre = (int(np.floor(cy)), int(np.floor(cx)))
    if white[centre]:
        accessory = "dot"
    elif white.sum() >= 3:
        accessory = "ring"
    else:
        accessory = "none"
    return RoleSpec(shape=shape, color=color, accessory=accessory)


def detect_roles(image: np.ndarray) -> dict[str, RoleSpec]:
    """Quadrant -> role found there, for every non-empty quadrant."""
    found = {}
    for q in QUADRANTS:
        role = oracle_extract_role_feature(image, q)
        if role is not None:
            found[q] = role
    return found


def background_mask(image: np.ndarray) -> np.ndarray:
    """Pixels that are scene background or pattern ink."""
    kinds = KNOWN_KIND[snap(image)]
    return (kinds == "scene") | (kinds == "pattern")


def detect_scene(image: np.ndarray) -> tuple[str, str] | None:
    """``(scene color, pattern)`` read off the background, or ``None`` if absent."""
    idx = snap(image)
    kinds = KNOWN_KIND[idx]
    bg = (kinds == "scene") | (kinds == "pattern")
    if bg.sum() < 0.1 * idx.size:
        return None
    # pattern ink votes for the scene it belongs to
    names = np.array(KNOWN_NAME)[idx[bg]]
    scene_names = list(SCENE_COLORS)
    votes = [(names == name).sum() for name in scene_names]
    color = scene_names[int(np.argmax(votes))]
    ink_frac = (kinds[bg] == "pattern").mean()
    if ink_frac < 0.03:
        pattern = "plain"
    elif ink_frac < 0.18:
        pattern = "dots"
    else:
        pattern = "stripes"
    return color, pattern

