import math

import numpy as np
import pytest

from shotboard import tensor as T
from shotboard.errors import ConfigError, ContractError, DomainError, VocabularyError
from shotboard.model import (
    REF, SHOT, DiT, ModelConfig, build_token_sequence, rope_angles, rope_apply, timestep_features,
)

TINY = ModelConfig(d_model=12, n_heads=2, n_blocks=2, latent_dim=4, grid=2, vocab_size=10,
                   max_script_len=4, mlp_ratio=1, time_freqs=2)


def latents(seed, n, d=4, g=2):
    return T.make_rng(seed).standard_normal((n, d, g, g))


def tiny_model(seed=0, **kw):
    from dataclasses import replace
    return DiT(replace(TINY, init_seed=seed, **kw), dtype=np.float64)


def scripts_for(model, K, S, seed=0):
    rng = T.make_rng(seed)
    v = model.config.vocab_size
    return model.embed_scripts([list(rng.integers(0, v, 3)) for _ in range(K)],
                               [list(rng.integers(0, v, 4)) for _ in range(S)])


# -- script embedding -------------------------------------------------------------

def test_embed_script_lookup():
    m = tiny_model()
    a, b = m.embed_script([1, 2, 3]), m.embed_script([1, 2, 3])
    assert np.array_equal(a.data, b.data)
    c = m.embed_script([1, 7, 3])
    diff = np.any(a.data != c.data, axis=1)
    assert diff.tolist() == [False, True, False]


def test_empty_script_is_null_token():
    m = tiny_model()
    e = m.embed_script([])
    assert e.shape == (1, 12) and np.array_equal(e.data, m.params["null"].data)


def test_out_of_vocab():
    with pytest.raises(VocabularyError):
        tiny_model().embed_script([10])


# -- token sequence -----------------------------------------------------------------

def t_idx(seq, kind):
    return [seg.t_idx for seg in seq.segments if seg.kind == kind]


def test_prepend_indices():
    seq = build_token_sequence(latents(0, 2), latents(1, 3), "prepend")
    assert t_idx(seq, REF) == [0, 1] and t_idx(seq, SHOT) == [2, 3, 4]
    assert [s.kind for s in seq.segments] == [REF, REF, SHOT, SHOT, SHOT]


def test_append_indices_and_storage():
    seq = build_token_sequence(latents(0, 1), latents(1, 2), "append")
    assert t_idx(seq, SHOT) == [0, 1] and t_idx(seq, REF) == [2]
    assert [s.kind for s in seq.segments] == [SHOT, SHOT, REF]


def test_negative_offset_indices():
    seq = build_token_sequence(latents(0, 1), latents(1, 1), "negative", neg_delta=8)
    assert t_idx(seq, REF) == [-8] and t_idx(seq, SHOT) == [0]


def test_phase_offset_changes_only_phases():
    zr, zs = latents(0, 2), latents(1, 2)
    pre = build_token_sequence(zr, zs, "prepend")
    ph = build_token_sequence(zr, zs, "phase", phase_delta=math.pi / 4)
    assert np.array_equal(pre.tokens(), ph.tokens())
    assert np.array_equal(pre.positions(), ph.positions())
    n = pre.tokens_per_segment
    assert np.all(ph.phases()[: 2 * n] == math.pi / 4) and np.all(ph.phases()[2 * n:] == 0)


@pytest.mark.parametrize("K,S", [(0, 1), (1, 3), (2, 2)])
def test_prepend_and_append_ranges_disjoint(K, S):
    for strategy in (("prepend", "append") if K else ("prepend",)):
        seq = build_token_sequence(latents(0, K) if K else None, latents(1, S), strategy)
        r, s = t_idx(seq, REF), t_idx(seq, SHOT)
        assert not set(r) & set(s)
        assert s == sorted(s) and r == sorted(r)


def test_strategy_requiring_refs_with_k0():
    with pytest.raises(ConfigError):
        build_token_sequence(None, latents(1, 2), "append")


# -- rope -------------------------------------------------------------------------------

def test_rope_zero_position_identity():
    x = T.Tensor(T.make_rng(0).standard_normal((3, 12)))
    y = rope_apply(x, rope_angles(np.zeros((3, 3)), 12))
    assert np.array_equal(x.data, y.data)


def test_rope_is_isometry():
    rng = T.make_rng(1)
    x = T.Tensor(rng.standard_normal((5, 24)))
    y = rope_apply(x, rope_angles(rng.integers(-9, 9, (5, 3)), 24))
    assert np.allclose(np.linalg.norm(x.data, axis=1), np.linalg.norm(y.data, axis=1), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_rope_relative_property(seed):
    rng = T.make_rng(seed)
    q, k = rng.standard_normal((2, 1, 24))
    p1, p2 = rng.integers(-20, 20, (2, 3)).astype(float)
    shift = rng.integers(-20, 20, 3).astype(float)

    def dot(a, b):
        qa = rope_apply(T.Tensor(q), rope_angles(a[None], 24)).data
        kb = rope_apply(T.Tensor(k), rope_angles(b[None], 24)).data
        return float((qa * kb).sum())

    assert abs(dot(p1, p2) - dot(p1 + shift, p2 + shift)) < 1e-5


def test_rope_needs_head_dim_divisible_by_six():
    with pytest.raises(ConfigError):
        rope_angles(np.zeros((1, 3)), 8)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=32, n_heads=4).validate()


def test_rope_gradient():
    x = T.Tensor(T.make_rng(2).standard_normal((2, 3, 12)), requires_grad=True)
    ang = rope_angles(T.make_rng(3).integers(0, 5, (3, 3)), 12, phase=np.full(3, 0.3))
    w = T.Tensor(T.make_rng(4).standard_normal((2, 3, 12)))
    assert T.grad_check(lambda a: T.sum(rope_apply(a, ang) * w), [x]) < 1e-6


# -- self attention ------------------------------------------------------------------------

def test_single_token_attends_to_itself():
    m = tiny_model()
    x = T.Tensor(T.make_rng(5).standard_normal((1, 12)))
    y, probs = m.self_attention(x, rope_angles(np.zeros((1, 3)), 6), 0, capture=True)
    assert np.allclose(probs.data, 1.0)
    p = m.params
    h = T.layer_norm(x, p["blocks.0.ln1.g"], p["blocks.0.ln1.b"])
    expected = x.data + (h.data @ p["blocks.0.v.w"].data) @ p["blocks.0.o.w"].data + p["blocks.0.o.b"].data
    assert np.allclose(y.data, expected, atol=1e-12)


def test_equal_logits_split_evenly():
    m = tiny_model()
    m.params["blocks.0.q.w"].data[:] = 0.0
    x = T.Tensor(T.make_rng(6).standard_normal((2, 12)))
    _, probs = m.self_attention(x, rope_angles(np.zeros((2, 3)), 6), 0, capture=True)
    assert np.allclose(probs.data, 0.5)


def test_captured_rows_match_dense_oracle():
    m = tiny_model(seed=3)
    rng = T.make_rng(7)
    x = T.Tensor(rng.standard_normal((5, 12)))
    pos = rng.integers(0, 4, (5, 3))
    ang = rope_angles(pos, 6)
    _, probs = m.self_attention(x, ang, 0, capture=True)
    assert np.all(np.abs(probs.data.sum(-1) - 1) < 1e-6)

    # independent dense recomputation with explicit per-pair rotations
    p = m.params
    xd = x.data
    h = (xd - xd.mean(1, keepdims=True)) / np.sqrt(xd.var(1, keepdims=True) + 1e-5)
    q, k = h @ p["blocks.0.q.w"].data, h @ p["blocks.0.k.w"].data
    for head in range(2):
        sl = np.s_[:, head * 6:(head + 1) * 6]
        qr, kr = q[sl].copy(), k[sl].copy()
        for i in range(5):
            for j in range(3):
                c, s = math.cos(ang[i, j]), math.sin(ang[i, j])
                for arr in (qr, kr):
                    a, b = arr[i, 2 * j], arr[i, 2 * j + 1]
                    arr[i, 2 * j], arr[i, 2 * j + 1] = c * a - s * b, s * a + c * b
        logits = qr @ kr.T / math.sqrt(6)
        dense = np.exp(logits - logits.max(1, keepdims=True))
        dense /= dense.sum(1, keepdims=True)
        assert np.allclose(probs.data[head], dense, atol=1e-12)


# -- cross attention -------------------------------------------------------------------------

def _cross_inputs(m, n_seg, seed):
    rng = T.make_rng(seed)
    x = T.Tensor(rng.standard_normal((4 * n_seg, 12)))
    scripts = [m.embed_script(list(rng.integers(0, 10, 3))) for _ in range(n_seg)]
    return x, scripts, np.repeat(np.arange(n_seg), 4)


def test_cross_attention_block_isolation():
    m = tiny_model()
    x, scripts, seg = _cross_inputs(m, 3, 8)
    base = m.cross_attention(x, scripts, seg, 0).data
    scripts[1] = T.Tensor(T.make_rng(9).standard_normal((3, 12)))
    moved = m.cross_attention(x, scripts, seg, 0).data
    assert np.array_equal(base[seg != 1], moved[seg != 1])
    assert not np.array_equal(base[seg == 1], moved[seg == 1])


def test_identical_scripts_identical_deltas():
    m = tiny_model()
    row = T.make_rng(10).standard_normal(12)
    x = T.Tensor(np.tile(row, (6, 1)))
    s = m.embed_script([1, 2])
    out = m.cross_attention(x, [s, s, s], np.repeat(np.arange(3), 2), 0).data
    assert np.all(out == out[0])


def test_cross_attention_matches_independent_segments():
    m = tiny_model()
    x, scripts, seg = _cross_inputs(m, 2, 11)
    joint = m.cross_attention(x, scripts, seg, 0).data
    for i in range(2):
        alone = m.cross_attention(T.Tensor(x.data[seg == i]), [scripts[i]], np.zeros(4, int), 0).data
        assert np.max(np.abs(joint[seg == i] - alone)) < 1e-7


def test_script_count_mismatch():
    m = tiny_model()
    x, scripts, seg = _cross_inputs(m, 2, 12)
    with pytest.raises(ContractError):
        m.cross_attention(x, scripts[:1], seg, 0)


# -- timestep ---------------------------------------------------------------------------------

def test_timestep_embedding_basics():
    m = tiny_model()
    e0, e1 = m.timestep_embed(0.0).data, m.timestep_embed(1.0).data
    assert not np.allclose(e0, e1)
    assert np.array_equal(m.timestep_embed(0.3).data, m.timestep_embed(0.3).data)
    with pytest.raises(DomainError):
        timestep_features(1.5, 4)


@pytest.mark.parametrize("t", T.make_rng(13).random(8).round(4).tolist())
def test_timestep_embedding_smooth(t):
    m = DiT(ModelConfig())
    t = min(t, 1 - 1e-3)
    a, b = m.timestep_embed(t).data, m.timestep_embed(t + 1e-3).data
    assert np.linalg.norm(b - a) < 0.1 * np.linalg.norm(a)


# -- forward ------------------------------------------------------------------------------------

@pytest.mark.parametrize("K,S", [(0, 1), (0, 3), (1, 2), (2, 4)])
def test_forward_shape(K, S):
    m = tiny_model()
    seq = m.sequence(latents(0, K) if K else None, latents(1, S))
    v, rec = m.forward(seq, scripts_for(m, K, S), 0.4, capture=True)
    assert v.shape == (S, 4, 2, 2)
    n = seq.n_tokens
    for probs in rec.blocks:
        assert probs.shape == (2, n, n)
        assert np.all(np.abs(probs.data.sum(-1) - 1) < 1e-5)


@pytest.mark.parametrize("strategy", ["prepend", "append", "phase", "negative"])
def test_forward_every_strategy(strategy):
    m = tiny_model(strategy=strategy)
    v, _ = m.forward(m.sequence(latents(0, 2), latents(1, 2)), scripts_for(m, 2, 2), 0.5)
    assert v.shape == (2, 4, 2, 2) and np.all(np.isfinite(v.data))


def test_forward_deterministic():
    outs = []
    for _ in range(2):
        m = tiny_model(seed=4)
        v, _ = m.forward(m.sequence(latents(0, 1), latents(1, 2)), scripts_for(m, 1, 2), 0.7)
        outs.append(v.data.tobytes())
    assert outs[0] == outs[1]


def test_full_model_grad_check():
    m = tiny_model(seed=1)
    seq = m.sequence(latents(2, 1), latents(3, 2), noise_flags=[False, True])
    ids = ([[1, 2, 3]], [[4, 5], [6, 7, 8]])
    w = T.Tensor(T.make_rng(14).standard_normal((2, 4, 2, 2)))
    names = list(m.params)

    def f(*params):
        m.params = dict(zip(names, params))
        v, _ = m.forward(seq, m.embed_scripts(*ids), 0.6)
        return T.sum(v * w)

    assert T.grad_check(f, list(m.params.values())) < 1e-4


def test_shot_isolation_at_one_block():
    m = tiny_model(seed=2, n_blocks=1)
    seq = m.sequence(latents(0, 1), latents(1, 3))
    base, _ = m.forward(seq, m.embed_scripts([[1, 2]], [[3], [4, 5], [6]]), 0.5)
    moved, _ = m.forward(seq, m.embed_scripts([[1, 2]], [[3], [9, 9, 9], [6]]), 0.5)
    assert np.array_equal(base.data[[0, 2]], moved.data[[0, 2]])
    assert not np.array_equal(base.data[1], moved.data[1])


def test_cross_segment_mass_vanishes_at_four_blocks():
    m = tiny_model(n_blocks=4)
    seq = m.sequence(latents(0, 2), latents(1, 3))
    m.forward(seq, scripts_for(m, 2, 3), 0.5)
    seg = seq.segment_of_token()
    seg_key = m.cross_key_segments
    lens = [3, 3, 4, 4, 4]  # refs then shots in storage order under prepend
    assert [(seg_key == i).sum() for i in range(5)] == lens
    off = seg[:, None] != seg_key[None, :]
    assert len(m.cross_probs) == 4
    for probs in m.cross_probs:
        assert probs[:, off].max() < 1e-30
