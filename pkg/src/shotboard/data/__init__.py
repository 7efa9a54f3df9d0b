"""Synthetic storyboards with exact ground truth."""

from .oracle import background_mask, detect_roles, detect_scene, oracle_extract_role_feature
from .palette import ACCESSORIES, PATTERNS, QUADRANTS, ROLE_COLORS, SCALES, SCENE_COLORS, SHAPES
from .render import REF_VARIANTS, RoleSpec, render_reference, render_shot, scene_background
from .scripts import (
    MAX_SCRIPT_LEN, VOCAB, parse_reference_script, parse_shot_script, reference_script, shot_script,
    tokenize,
)
from .synth import (
    ShotSpec, StoryboardSample, SynthConfig, build_sample, gen_dataset, gen_role, gen_sample,
    load_dataset, load_sample, sample_from_scripts, sample_from_seed, save_sample,
)
