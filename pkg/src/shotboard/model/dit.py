"""Diffusion transformer over reference and shot latent tokens.

Each block runs joint self-attention over every token (references and shots
alike, with 3-axis RoPE), then shot-wise cross-attention in which a segment's
tokens see only that segment's script, then an MLP.  The timestep embedding
is added to every token before each block; clean segments use ``t = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import ContractError, DomainError, VocabularyError
from ..tensor import Tensor
from .config import ModelConfig
from .rope import rope_angles, rope_apply
from .tokens import REF, SHOT, TokenSequence, build_token_sequence


@dataclass
class AttentionRecord:
    """Self-attention probabilities per block, each ``heads×N×N``.

    Entries are tensors still attached to the tape, so losses built from
    them train the attention logits.
    """

    blocks: list[Tensor] = field(default_factory=list)
    sequence: TokenSequence | None = None

    def numpy(self, block: int) -> np.ndarray:
        return self.blocks[block].data


@dataclass
class ScriptEmbedding:
    """Per-segment script embeddings in logical order (refs, then shots)."""

    refs: list[Tensor]
    shots: list[Tensor]

    def for_sequence(self, seq: TokenSequence) -> list[Tensor]:
        if len(self.refs) != seq.K or len(self.shots) != seq.S:
            raise ContractError(
                f"{len(self.refs)}+{len(self.shots)} scripts for a sequence with K={seq.K}, S={seq.S}")
        return [self.refs[seg.index] if seg.kind == REF else self.shots[seg.index] for seg in seq.segments]


def _init(rng, shape, std, dtype):
    return Tensor(T.normal(rng, shape, np.float64) * std, requires_grad=True, dtype=dtype)


def build_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    cfg.validate()
    rng = T.make_rng(cfg.init_seed)
    D, d, H = cfg.d_model, cfg.latent_dim, cfg.mlp_ratio * cfg.d_model
    F = 2 * cfg.time_freqs
    p: dict[str, Tensor] = {}

    def lin(name, n_in, n_out, bias=True, std=None):
        p[f"{name}.w"] = _init(rng, (n_in, n_out), std if std is not None else 1 / math.sqrt(n_in), dtype)
        if bias:
            p[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype)

    def norm(name):
        p[f"{name}.g"] = Tensor(np.ones(D), requires_grad=True, dtype=dtype)
        p[f"{name}.b"] = Tensor(np.zeros(D), requires_grad=True, dtype=dtype)

    lin("in", d, D)
    p["pos"] = _init(rng, (cfg.grid * cfg.grid, D), 0.02, dtype)
    p["kind"] = _init(rng, (2, D), 0.02, dtype)
    p["tok"] = _init(rng, (cfg.vocab_size, D), 1.0, dtype)
    p["tok_pos"] = _init(rng, (cfg.max_script_len, D), 0.1, dtype)
    p["null"] = _init(rng, (1, D), 1.0, dtype)
    lin("time1", F, D)
    lin("time2", D, D, std=0.1 / math.sqrt(D))
    res = 0.1  # residual-branch outputs start near zero so each block begins close to identity
    for i in range(cfg.n_blocks):
        b = f"blocks.{i}"
        norm(f"{b}.ln1")
        lin(f"{b}.q", D, D, bias=False)
        lin(f"{b}.k", D, D, bias=False)
        lin(f"{b}.v", D, D, bias=False)
        lin(f"{b}.o", D, D, std=res / math.sqrt(D))
        norm(f"{b}.ln2")
        lin(f"{b}.cq", D, D, bias=False)
        lin(f"{b}.ck", D, D, bias=False)
        lin(f"{b}.cv", D, D, bias=False)
        lin(f"{b}.co", D, D, std=res / math.sqrt(D))
        norm(f"{b}.ln3")
        lin(f"{b}.mlp1", D, H)
        lin(f"{b}.mlp2", H, D, std=res / math.sqrt(H))
    norm("ln_out")
    lin("out", D, d, std=0.1 / math.sqrt(D))
    return p


def timestep_features(t, n_freqs: int) -> np.ndarray:
    """Sinusoidal features of ``t`` (scalar or vector) on a geometric ladder up to 100 rad."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise DomainError(f"timestep must lie in [0, 1], got {t.tolist()}")
    freqs = 100.0 ** (np.arange(n_freqs) / max(1, n_freqs - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _linear(x: Tensor, p: dict, name: str) -> Tensor:
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y + b if b is not None else y


def _norm(x: Tensor, p: dict, name: str) -> Tensor:
    return T.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _heads(x: Tensor, n_heads: int) -> Tensor:
    n, D = x.shape
    return T.transpose(T.reshape(x, (n, n_heads, D // n_heads)), (1, 0, 2))


def _merge(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


class DiT:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, dtype=np.float32):
        self.config = config.validate()
        self.params = params if params is not None else build_params(config, dtype)
        self.calls = 0  # forward-pass counter, read by the sampler tests
        self.cross_probs: list[np.ndarray] = []  # last forward's cross-attention maps
        self.cross_key_segments = np.zeros(0, dtype=int)  # segment of each key column, -1 for padding

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- conditioning --------------------------------------------------------------

    def embed_script(self, token_ids) -> Tensor:
        """Token ids -> ``len×d_model``; the empty script maps to the null token."""
        ids = np.asarray(list(token_ids), dtype=np.int64)
        cfg = self.config
        if ids.size == 0:
            return self.params["null"] * 1.0
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise VocabularyError(f"token id out of range [0, {cfg.vocab_size}): {ids.tolist()}")
        if ids.size > cfg.max_script_len:
            raise VocabularyError(f"script of {ids.size} tokens exceeds max_script_len={cfg.max_script_len}")
        return T.take(self.params["tok"], ids) + T.slice(self.params["tok_pos"], ((0, ids.size),))

    def embed_scripts(self, ref_scripts, shot_scripts) -> ScriptEmbedding:
        return ScriptEmbedding([self.embed_script(s) for s in ref_scripts],
                               [self.embed_script(s) for s in shot_scripts])

    def timestep_embed(self, t) -> Tensor:
        """``len(t)×d_model`` embedding (a 2-layer MLP over sinusoidal features)."""
        f = Tensor(timestep_features(t, self.config.time_freqs), dtype=self.dtype)
        return _linear(T.silu(_linear(f, self.params, "time1")), self.params, "time2")

    def sequence(self, z_ref, z_shot, noise_flags=None) -> TokenSequence:
        """Token sequence under this model's positional strategy.

        Without references every strategy reduces to shots at ``0..S-1``.
        """
        cfg = self.config
        K = 0 if z_ref is None else len(z_ref)
        strategy = cfg.strategy if K > 0 else "prepend"
        return build_token_sequence(z_ref, z_shot, strategy, noise_flags, cfg.phase_delta, cfg.neg_delta)

    # -- layers ----------------------------------------------------------------------

    def self_attention(self, x: Tensor, angles: np.ndarray, block: int, capture: bool):
        p, H = self.params, self.config.n_heads
        b = f"blocks.{block}"
        h = _norm(x, p, f"{b}.ln1")
        q = rope_apply(_heads(_linear(h, p, f"{b}.q"), H), angles)
        k = rope_apply(_heads(_linear(h, p, f"{b}.k"), H), angles)
        v = _heads(_linear(h, p, f"{b}.v"), H)
        dh = q.shape[-1]
        probs = T.softmax(T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(dh)), axis=-1)
        out = _linear(_merge(probs @ v), p, f"{b}.o")
        return x + out, (probs if capture else None)

    def cross_attention(self, x: Tensor, scripts: list[Tensor], seg_of_token: np.ndarray,
                        block: int) -> Tensor:
        """Block-isolated attention: segment ``i`` reads only script ``i``."""
        if len(scripts) != int(seg_of_token.max()) + 1:
            raise ContractError(f"{len(scripts)} scripts for {int(seg_of_token.max()) + 1} segments")
        p, H = self.params, self.config.n_heads
        b = f"blocks.{block}"
        # every script occupies a fixed-width key slot so that editing one script
        # never changes the shapes (and hence the rounding) seen by other segments
        width = self.config.max_script_len
        pad = [T.concat([s, Tensor(np.zeros((width - s.shape[0], s.shape[1]), dtype=s.dtype))], axis=0)
               if s.shape[0] < width else s for s in scripts]
        c = T.concat(pad, axis=0)
        seg_of_key = np.full(width * len(scripts), -1)
        for i, s in enumerate(scripts):
            seg_of_key[i * width: i * width + s.shape[0]] = i
        self.cross_key_segments = seg_of_key
        blocked = seg_of_token[:, None] != seg_of_key[None, :]
        h = _norm(x, p, f"{b}.ln2")
        q = _heads(_linear(h, p, f"{b}.cq"), H)
        k = _heads(_linear(c, p, f"{b}.ck"), H)
        v = _heads(_linear(c, p, f"{b}.cv"), H)
        dh = q.shape[-1]
        logits = T.masked_fill(T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(dh)), blocked)
        probs = T.softmax(logits, axis=-1)
        self.cross_probs.append(probs.data)
        return x + _linear(_merge(probs @ v), p, f"{b}.co")

    def mlp(self, x: Tensor, block: int) -> Tensor:
        p, b = self.params, f"blocks.{block}"
        h = _norm(x, p, f"{b}.ln3")
        return x + _linear(T.silu(_linear(h, p, f"{b}.mlp1")), p, f"{b}.mlp2")

    # -- forward ------------------------------------------------------------------------

    def forward(self, seq: TokenSequence, scripts: ScriptEmbedding, t: float, capture: bool = False):
        """Velocity prediction ``S×d×h×w`` for every shot, plus attention records."""
        self.calls += 1
        p, cfg = self.params, self.config
        h, w = seq.grid
        n_seg, n = len(seq.segments), seq.tokens_per_segment
        if h * w != p["pos"].shape[0]:
            raise ContractError(f"latent grid {h}×{w} does not match the model grid {cfg.grid}×{cfg.grid}")
        seg_scripts = scripts.for_sequence(seq)
        seg_of_token = seq.segment_of_token()
        angles = rope_angles(seq.positions(), cfg.head_dim, cfg.rope_theta, seq.phases())

        x = _linear(Tensor(seq.tokens(), dtype=self.dtype), p, "in")
        x = x + _tile(p["pos"], n_seg)
        x = x + T.take(p["kind"], np.repeat(seq.kinds(), n))
        seg_t = [t if seg.noised else 0.0 for seg in seq.segments]
        temb = T.take(self.timestep_embed(seg_t), seg_of_token)

        record = AttentionRecord(sequence=seq) if capture else None
        self.cross_probs = []
        for i in range(cfg.n_blocks):
            x = x + temb
            x, probs = self.self_attention(x, angles, i, capture)
            if capture:
                record.blocks.append(probs)
            x = self.cross_attention(x, seg_scripts, seg_of_token, i)
            x = self.mlp(x, i)

        shot_rows = np.concatenate([np.arange(j * n, (j + 1) * n) for j in seq.shot_slots()])
        out = _linear(_norm(T.take(x, shot_rows), p, "ln_out"), p, "out")
        # tokens are (y, x)-major within a segment
        vel = T.transpose(T.reshape(out, (seq.S, h, w, cfg.latent_dim)), (0, 3, 1, 2))
        return vel, record

    __call__ = forward


def _tile(x: Tensor, reps: int) -> Tensor:
    return T.concat([x] * reps, axis=0) if reps > 1 else x
