"""Diffusion transformer, token layout and checkpoints."""

from .config import STRATEGIES, ModelConfig
from .dit import DiT, AttentionRecord, ScriptEmbedding, build_params, timestep_features
from .rope import rope_angles, rope_apply
from .tokens import REF, SHOT, Segment, TokenSequence, build_token_sequence
