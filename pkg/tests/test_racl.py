import math

import numpy as np
import pytest

from shotboard import tensor as T
from shotboard.errors import ContractError, ShapeError
from shotboard.model import DiT, ModelConfig, build_token_sequence
from shotboard.racl import (
    RoleMaskSet, aggregate, aggregate_ref_to_shot, aggregate_shot_to_shot, bce, combine_terms,
    downsample_mask, racl_loss, racl_terms,
)

LO, HI = 1e-4, 1 - 1e-4


def seq_for(K, S, g=2, d=3):
    rng = T.make_rng(0)
    return build_token_sequence(rng.standard_normal((K, d, g, g)) if K else None,
                                rng.standard_normal((S, d, g, g)))


def records_from(probs_list):
    return [T.Tensor(np.asarray(p, dtype=np.float64), requires_grad=True) for p in probs_list]


# -- masks -----------------------------------------------------------------------------

def test_downsample_saturation():
    assert np.all(downsample_mask(np.ones((8, 8)), 2, 2) == HI)
    assert np.all(downsample_mask(np.zeros((8, 8)), 4, 4) == LO)


def test_downsample_one_white_quadrant():
    m = np.zeros((4, 4))
    m[:2, :2] = 1
    assert downsample_mask(m, 2, 2).tolist() == [[HI, LO], [LO, LO]]


def test_downsample_area_average():
    m = np.zeros((4, 4))
    m[0, 0] = 1
    assert downsample_mask(m, 2, 2)[0, 0] == 0.25


def test_downsample_non_divisible():
    with pytest.raises(ShapeError):
        downsample_mask(np.zeros((5, 4)), 2, 2)


# -- aggregation -------------------------------------------------------------------------

def test_uniform_row_gives_quarter_map():
    seq = seq_for(1, 1)  # ref tokens 0..3, shot tokens 4..7
    p = np.zeros((1, 8, 8))
    p[0, :, 4:] = 0.25
    mask = np.array([[HI, LO], [LO, LO]])
    A = aggregate_ref_to_shot(records_from([p]), seq, 0, mask, 0)
    assert np.allclose(A.data, 0.25)


def test_two_queries_hand_sum():
    seq = seq_for(1, 1)
    p = np.zeros((1, 8, 8))
    p[0, 0, 4] = 1.0
    p[0, 1, 5] = 1.0
    mask = np.array([[HI, HI], [LO, LO]])
    A = aggregate_ref_to_shot(records_from([p]), seq, 0, mask, 0)
    assert np.allclose(A.data.reshape(-1), [0.5, 0.5, 0, 0])


def test_attention_outside_shot_gives_zero_map():
    seq = seq_for(1, 1)
    p = np.zeros((1, 8, 8))
    p[0, :, :4] = 0.25
    A = aggregate_ref_to_shot(records_from([p]), seq, 0, np.full((2, 2), HI), 0)
    assert np.all(A.data == 0)


def test_shot_to_shot_shares_kernel():
    seq = seq_for(0, 2)
    p = T.softmax(T.Tensor(T.make_rng(1).standard_normal((2, 8, 8)))).data
    rec = records_from([p])
    mask = np.array([[HI, LO], [HI, LO]])
    a = aggregate_shot_to_shot(rec, seq, 0, mask, 1).data
    b = aggregate(rec, np.array([0, 2]), (4, 8)).data.reshape(2, 2)
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        aggregate_shot_to_shot(rec, seq, 1, mask, 1)


def test_aggregation_matches_dense_oracle_from_raw_qk():
    rng = T.make_rng(2)
    seq = seq_for(0, 2)
    n, heads, blocks, dh = 8, 2, 3, 4
    qk = rng.standard_normal((blocks, 2, heads, n, dh))
    rec = [T.softmax(T.Tensor(q) @ T.transpose(T.Tensor(k), (0, 2, 1)) * (1 / math.sqrt(dh)), -1) for q, k in qk]
    mask = np.array([[HI, HI], [LO, HI]])
    got = aggregate_shot_to_shot(rec, seq, 0, mask, 1).data.reshape(-1)

    queries = [0, 1, 3]
    oracle = np.zeros(4)
    for q, k in qk:
        for h in range(heads):
            for i in queries:
                logits = [float(q[h, i] @ k[h, j]) / math.sqrt(dh) for j in range(n)]
                mx = max(logits)
                e = [math.exp(x - mx) for x in logits]
                for c in range(4):
                    oracle[c] += e[4 + c] / sum(e)
    oracle /= blocks * heads * len(queries)
    assert np.max(np.abs(got - oracle)) < 1e-6


def test_renorm_rows_sum_to_one_over_shot():
    seq = seq_for(1, 1)
    p = T.softmax(T.Tensor(T.make_rng(3).standard_normal((2, 8, 8)))).data
    A = aggregate_ref_to_shot(records_from([p]), seq, 0, np.full((2, 2), HI), 0, renorm=True)
    assert abs(A.data.sum() - 1) < 1e-12


def test_maps_invariant_to_head_and_block_order():
    seq = seq_for(1, 1)
    rng = T.make_rng(4)
    ps = [T.softmax(T.Tensor(rng.standard_normal((3, 8, 8)))).data for _ in range(2)]
    mask = np.array([[HI, LO], [HI, HI]])
    a = aggregate_ref_to_shot(records_from(ps), seq, 0, mask, 0).data
    b = aggregate_ref_to_shot(records_from([ps[1][::-1], ps[0][[2, 0, 1]]]), seq, 0, mask, 0).data
    assert np.allclose(a, b, atol=1e-15)


# -- BCE -------------------------------------------------------------------------------------

def test_bce_closed_forms():
    half = T.Tensor(np.full((2, 2), 0.5))
    assert abs(bce(half, np.ones((2, 2))).item() - math.log(2)) < 1e-12
    assert abs(bce(half, np.zeros((2, 2))).item() - math.log(2)) < 1e-12
    v = bce(T.Tensor(np.array([0.9, 0.1])), np.array([1.0, 0.0])).item()
    assert abs(v - (-math.log(0.9))) < 1e-12 and abs(v - 0.1054) < 1e-4


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce(T.Tensor(np.ones((2, 2)) * 0.5), np.ones(4))


# -- the loss ------------------------------------------------------------------------------------

def mask_of(cells):
    m = np.full((2, 2), LO)
    for c in cells:
        m.flat[c] = HI
    return m


def test_perfect_maps_hit_clip_floor():
    m = mask_of([0])
    terms = {(0, 0): [("ref", T.Tensor(m), m), ("shot", T.Tensor(m), m)]}
    assert combine_terms(terms).item() < 0.01


def test_uniform_half_maps_give_two_ln2_per_pair():
    bin_m = np.array([[1.0, 0.0], [0.0, 1.0]])
    half = T.Tensor(np.full((2, 2), 0.5))
    terms = {(0, 0): [("ref", half, bin_m), ("shot", half, bin_m)],
             (1, 0): [("ref", half, bin_m), ("shot", half, bin_m)],
             (1, 1): [("ref", half, bin_m), ("shot", half, bin_m)]}
    assert abs(combine_terms(terms).item() - 2 * math.log(2)) < 1e-12


def test_single_ref_single_shot_is_one_bce():
    seq = seq_for(1, 1)
    p = T.softmax(T.Tensor(T.make_rng(5).standard_normal((1, 8, 8)))).data
    masks = RoleMaskSet(refs={0: mask_of([0, 1])}, shots={(0, 0): mask_of([3])})
    corr = {0: {"ref": 0, "shots": [0]}}
    terms = racl_terms(records_from([p]), seq, masks, corr)
    assert [label for label, _, _ in terms[(0, 0)]] == ["ref"]
    A = aggregate_ref_to_shot(records_from([p]), seq, 0, masks.refs[0], 0)
    assert racl_loss(records_from([p]), seq, masks, corr).item() == bce(A, masks.shots[(0, 0)]).item()


def test_absent_role_is_skipped():
    seq = seq_for(1, 2)
    p = T.softmax(T.Tensor(T.make_rng(6).standard_normal((1, 12, 12)))).data
    masks = RoleMaskSet(refs={0: mask_of([0])}, shots={(1, 0): mask_of([2])})
    terms = racl_terms(records_from([p]), seq, masks, {0: {"ref": 0, "shots": [1]}})
    assert list(terms) == [(1, 0)] and len(terms[(1, 0)]) == 1


def test_no_supervisable_pair_is_contract_error():
    seq = seq_for(0, 1)
    p = np.full((1, 4, 4), 0.25)
    with pytest.raises(ContractError):
        racl_loss(records_from([p]), seq, RoleMaskSet(), {0: {"ref": None, "shots": []}})


def test_loss_non_negative_on_random_attention():
    seq = seq_for(2, 2)
    rng = T.make_rng(7)
    for _ in range(5):
        p = T.softmax(T.Tensor(rng.standard_normal((2, 16, 16)) * 3)).data
        masks = RoleMaskSet(refs={0: mask_of([0]), 1: mask_of([3])},
                            shots={(0, 0): mask_of([1]), (1, 0): mask_of([2]), (1, 1): mask_of([0])})
        corr = {0: {"ref": 0, "shots": [0, 1]}, 1: {"ref": 1, "shots": [1]}}
        assert racl_loss(records_from([p]), seq, masks, corr).item() >= 0


def test_swapped_correspondence_increases_loss():
    # ref 0 / ref 1 tokens attend exactly onto role 0 / role 1 regions of the shot
    seq = seq_for(2, 1)  # ref0 0..3, ref1 4..7, shot 8..11
    masks = RoleMaskSet(refs={0: mask_of([0, 1, 2, 3]), 1: mask_of([0, 1, 2, 3])},
                        shots={(0, 0): mask_of([0]), (0, 1): mask_of([3])})
    p = np.zeros((1, 12, 12))
    p[0, 0:4, 8] = 1.0
    p[0, 4:8, 11] = 1.0
    rec = records_from([p])
    right = {0: {"ref": 0, "shots": [0]}, 1: {"ref": 1, "shots": [0]}}
    swapped = {0: {"ref": 1, "shots": [0]}, 1: {"ref": 0, "shots": [0]}}
    assert racl_loss(rec, seq, masks, swapped).item() > racl_loss(rec, seq, masks, right).item()


def test_gradient_flows_into_attention_logits():
    cfg = ModelConfig(d_model=12, n_heads=2, n_blocks=1, latent_dim=3, grid=2, vocab_size=6,
                      max_script_len=3, mlp_ratio=1, time_freqs=2)
    m = DiT(cfg, dtype=np.float64)
    rng = T.make_rng(8)
    seq = m.sequence(rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2)))
    masks = RoleMaskSet(refs={0: mask_of([0, 3])}, shots={(0, 0): mask_of([1]), (1, 0): mask_of([2, 3])})
    corr = {0: {"ref": 0, "shots": [0, 1]}}
    names = [n for n in m.params if n.startswith("blocks.0.") and n.split(".")[2] in ("q", "k", "ln1")]
    names += ["in.w", "pos"]

    def f(*params):
        m.params.update(dict(zip(names, params)))
        _, rec = m.forward(seq, m.embed_scripts([[1]], [[2], [3, 4]]), 0.5, capture=True)
        return racl_loss(rec, seq, masks, corr)

    assert T.grad_check(f, [m.params[n] for n in names]) < 1e-4
