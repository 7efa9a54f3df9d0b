import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shotboard.codec import (
    decode, encode, encode_reference, encode_shots, frame_count, load_latents, make_codec, pack_shots,
    save_latents, to_chw,
)
from shotboard.data import sample_from_seed
from shotboard.errors import PackingError, ShapeError
from shotboard.tensor import make_rng

CODEC = make_codec()


def rand_images(seed, n, size=48):
    rng = make_rng(seed)
    return [rng.integers(0, 256, (size, size, 3), dtype=np.uint8) for _ in range(n)]


@pytest.mark.parametrize("S,T,n", [(1, 4, 1), (3, 4, 9), (2, 1, 2)])
def test_pack_examples(S, T, n):
    seq = pack_shots(rand_images(0, S), T)
    assert len(seq.frames) == n


def test_pack_shot_of_frame_rule():
    assert pack_shots(rand_images(0, 3), 4).shot_of_frame == [0, 1, 1, 1, 1, 2, 2, 2, 2]


@pytest.mark.parametrize("T", [1, 2, 4])
def test_packing_length_law(T):
    imgs = rand_images(1, 32, size=8)
    for S in range(1, 33):
        seq = pack_shots(imgs[:S], T)
        assert len(seq.frames) == frame_count(S, T) == 1 + T * (S - 1)
        assert all(a <= b for a, b in zip(seq.shot_of_frame, seq.shot_of_frame[1:]))


def test_mixed_resolution_is_shape_error():
    with pytest.raises(ShapeError):
        pack_shots([np.zeros((8, 8, 3), np.uint8), np.zeros((16, 16, 3), np.uint8)])


def test_bad_frame_count_is_packing_error():
    seq = pack_shots(rand_images(2, 2), 4)
    seq.frames = seq.frames[:-1]
    with pytest.raises(PackingError):
        encode(seq, CODEC)


def test_identical_frames_identical_latents():
    img = rand_images(3, 1)[0]
    z = encode_shots([img] * 3, CODEC).values
    assert z.shape == (3, 48, 12, 12)
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])


def test_reference_shape_and_zero():
    z = encode_reference(rand_images(4, 1)[0], CODEC)
    assert z.values.shape == (1, 48, 12, 12) and z.labels == ["ref0"]
    zero = encode_reference(np.zeros((48, 48, 3), np.uint8), CODEC).values
    assert not zero.any()


def test_later_latent_equals_single_image_encode():
    s = sample_from_seed(7)
    z = encode_shots(s.shot_images[:2], CODEC).values
    alone = encode_reference(s.shot_images[1], CODEC).values[0]
    assert np.array_equal(z[1], alone)


def test_reference_equals_first_shot_latent():
    imgs = rand_images(5, 3)
    assert np.array_equal(encode_reference(imgs[0], CODEC).values[0], encode_shots(imgs, CODEC).values[0])


def test_same_image_twice_identical():
    img = rand_images(6, 1)[0]
    assert np.array_equal(encode_reference(img, CODEC).values, encode_reference(img, CODEC).values)


def test_roundtrip_exact_at_full_width():
    imgs = rand_images(8, 3)
    z = encode_shots(imgs, CODEC)
    back = decode(z, CODEC)
    ref = np.stack([to_chw(i) for i in imgs])
    assert np.mean((back - ref) ** 2) < 1e-5
    z2 = encode_shots(list(back), CODEC)
    assert np.max(np.abs(z2.values - z.values)) < 1e-5


def test_zero_latent_decodes_to_zero():
    assert not decode(np.zeros((1, 48, 12, 12)), CODEC).any()


def test_roundtrip_idempotent_for_narrow_codec():
    narrow = make_codec(d=20)
    img = to_chw(rand_images(9, 1)[0])
    once = decode(encode_shots([img], narrow), narrow)[0]
    twice = decode(encode_shots([once], narrow), narrow)[0]
    assert np.max(np.abs(once - twice)) < 1e-6


def test_causality_bit_exact():
    imgs = rand_images(10, 4)
    base = encode_shots(imgs, CODEC).values
    for j in range(4):
        bumped = [im.copy() for im in imgs]
        bumped[j] = 255 - bumped[j]
        z = encode_shots(bumped, CODEC).values
        assert np.array_equal(z[:j], base[:j])
        assert np.array_equal(z[j + 1:], base[j + 1:])  # per-shot locality
        assert not np.array_equal(z[j], base[j])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_encode_is_linear(seed, a, b):
    rng = make_rng(seed)
    x, y = rng.random((2, 3, 3, 16, 16))
    lhs = encode_shots(list(a * x + b * y), CODEC, T=2).values
    rhs = a * encode_shots(list(x), CODEC, T=2).values + b * encode_shots(list(y), CODEC, T=2).values
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_latent_file_roundtrip(tmp_path):
    z = encode_shots(rand_images(11, 2), CODEC)
    save_latents(tmp_path / "z.dstn", z)
    back = load_latents(tmp_path / "z.dstn")
    assert np.array_equal(back.values, z.values)
    assert back.sidecar() == {"s": 2, "d": 48, "h": 12, "w": 12, "p": 4, "T": 4, "labels": ["shot0", "shot1"]}
