"""Controlled vocabulary and the script grammar.

Reference script:  ``role<k> <color> <shape> <accessory>``
Shot script:       ``scene <scene-color> <pattern> [role<k> <quadrant> <scale>]...``

Shot scripts name roles by slot only; what a slot looks like is stated once,
in that role's reference script.  The empty script is the negative prompt.
"""

from __future__ import annotations

from ..errors import ContractError, VocabularyError
from .palette import ACCESSORIES, PATTERNS, QUADRANTS, ROLE_COLORS, SCALES, SCENE_COLORS, SHAPES

MAX_ROLES = 4
ROLE_TAGS = tuple(f"role{k + 1}" for k in range(MAX_ROLES))

VOCAB: tuple[str, ...] = (
    ("scene",) + ROLE_TAGS + tuple(ROLE_COLORS) + SHAPES + ACCESSORIES
    + QUADRANTS + SCALES + tuple(SCENE_COLORS) + PATTERNS
)
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
assert len(VOCAB) == len(WORD_ID) <= 64

# longest script: a shot with four placed roles
MAX_SCRIPT_LEN = 3 + 3 * MAX_ROLES


def tokenize(script: str) -> list[int]:
    ids = []
    for word in script.split():
        if word not in WORD_ID:
            raise VocabularyError(f"word {word!r} is not in the controlled vocabulary")
        ids.append(WORD_ID[word])
    return ids


def detokenize(ids) -> str:
    try:
        return " ".join(VOCAB[i] for i in ids)
    except IndexError as exc:
        raise VocabularyError(f"token id out of range in {list(ids)}") from exc


def reference_script(k: int, role) -> str:
    return f"{ROLE_TAGS[k]} {role.color} {role.shape} {role.accessory}"


def shot_script(scene: tuple[str, str], placements: dict) -> str:
    words = ["scene", scene[0], scene[1]]
    for k in sorted(placements):
        quadrant, scale = placements[k]
        words += [ROLE_TAGS[k], quadrant, scale]
    return " ".join(words)


def _expect(word, allowed, script):
    if word not in allowed:
        raise ContractError(f"cannot parse script {script!r}: unexpected {word!r}")
    return word


def parse_reference_script(script: str):
    """Return ``(k, RoleSpec)``."""
    from .render import RoleSpec

    words = script.split()
    if len(words) != 4:
        raise ContractError(f"cannot parse reference script {script!r}")
    k = ROLE_TAGS.index(_expect(words[0], ROLE_TAGS, script))
    return k, RoleSpec(
        shape=_expect(words[2], SHAPES, script),
        color=_expect(words[1], ROLE_COLORS, script),
        accessory=_expect(words[3], ACCESSORIES, script),
    )


def parse_shot_script(script: str):
    """Return ``(scene, placements)`` with placements ``{k: (quadrant, scale)}``."""
    words = script.split()
    if len(words) < 3 or (len(words) - 3) % 3 or words[0] != "scene":
        raise ContractError(f"cannot parse shot script {script!r}")
    scene = (_expect(words[1], SCENE_COLORS, script), _expect(words[2], PATTERNS, script))
    placements = {}
    for i in range(3, len(words), 3):
        k = ROLE_TAGS.index(_expect(words[i], ROLE_TAGS, script))
        quadrant = _expect(words[i + 1], QUADRANTS, script)
        if k in placements or any(q == quadrant for q, _ in placements.values()):
            raise ContractError(f"cannot parse shot script {script!r}: repeated role or quadrant")
        placements[k] = (quadrant, _expect(words[i + 2], SCALES, script))
    return scene, placements
