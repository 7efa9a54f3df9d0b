import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import shotboard.tensor as T
from shotboard.errors import ContractError, DomainError, RangeError, ShapeError, TapeError
from shotboard.tensor.serialize import from_bytes, to_bytes


def f64(data, grad=True):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def rand64(shape, seed):
    return T.Tensor(T.normal(T.make_rng(seed), shape, np.float64), requires_grad=True)


# -- create -------------------------------------------------------------------

def test_create_zeros_and_full():
    assert T.create([2, 2], "zeros").data.tolist() == [[0, 0], [0, 0]]
    assert T.create([3], "full", value=1.5).data.tolist() == [1.5, 1.5, 1.5]


def test_randn_deterministic_bytes():
    a = T.create([4], "randn", seed=7)
    b = T.create([4], "randn", seed=7)
    assert a.data.tobytes() == b.data.tobytes()
    assert T.create([4], "randn", seed=8).data.tobytes() != a.data.tobytes()


@pytest.mark.parametrize("shape", [[0], [2, 0], []])
def test_create_rejects_bad_shape(shape):
    with pytest.raises(ShapeError):
        T.create(shape)


def test_box_muller_moments():
    z = T.normal(T.make_rng(0), (20000,), np.float64)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


# -- matmul / softmax ----------------------------------------------------------

def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert (a @ T.Tensor(np.eye(2))).data.tolist() == [[1, 2], [3, 4]]
    b = T.Tensor([[5.0], [6.0]])
    assert (T.Tensor(np.eye(2)) @ b).data.tolist() == [[5], [6]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros([2, 3]), T.zeros([2, 3]))


def test_matmul_grad_vs_finite_differences():
    a, b = rand64((3, 4), 1), rand64((4, 2), 2)
    assert T.grad_check(lambda x, y: T.sum(x @ y), [a, b]) < 1e-6


def test_batched_matmul_broadcast_grad():
    a, b = rand64((2, 3, 4), 3), rand64((4, 5), 4)
    assert T.grad_check(lambda x, y: T.sum(T.square(x @ y)), [a, b]) < 1e-6


def test_softmax_symmetric_and_closed_form():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    expected = [math.exp(i) / sum(math.exp(j) for j in (1, 2, 3)) for i in (1, 2, 3)]
    assert np.allclose(T.softmax(T.Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)
    assert np.allclose(T.softmax(f64([1.0, 2.0, 3.0])).data, expected, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-50, 50), c=st.floats(-5, 5))
def test_softmax_shift_invariance(x, c):
    a = T.softmax(f64([x, x + c], grad=False)).data
    b = T.softmax(f64([0.0, c], grad=False)).data
    assert np.allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 9))
def test_softmax_rows_sum_to_one(seed, n):
    x = T.Tensor(T.normal(T.make_rng(seed), (3, n)) * 10)
    y = T.softmax(x, axis=-1).data
    assert np.all(np.abs(y.sum(-1) - 1) < 1e-6)
    assert np.all(y > 0) or n > 1  # underflow may zero tiny entries in float32


# -- elementwise ---------------------------------------------------------------

def test_add_and_clip():
    assert T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0])).data.tolist() == [4, 6]
    assert T.clip(T.Tensor([-1.0, 0.5, 2.0]), 0, 1).data.tolist() == [0, 0.5, 1]


def test_clip_gradient_zero_outside():
    x = f64([-1.0, 0.5, 2.0])
    T.backward(T.sum(T.clip(x, 0, 1)))
    assert x.grad.tolist() == [0, 1, 0]


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(T.Tensor([1.0, 0.0]))


def test_broadcast_limited_to_size_one():
    T.add(T.zeros([2, 3]), T.zeros([1, 3]))
    with pytest.raises(ShapeError):
        T.add(T.zeros([2, 3]), T.zeros([2, 2]))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("op", ["silu", "mul", "sub", "div", "log", "scale", "exp", "sqrt", "layer_norm", "softmax"])
def test_elementwise_grads(op, seed):
    x = rand64((3, 4), seed)
    y = rand64((1, 4), seed + 100)
    fns = {
        "silu": lambda a, b: T.sum(T.silu(a) * b),
        "mul": lambda a, b: T.sum(T.mul(a, b)),
        "sub": lambda a, b: T.sum(T.square(a - b)),
        "div": lambda a, b: T.sum(a / T.add(T.square(b), 1.0)),
        "log": lambda a, b: T.sum(T.log(T.add(T.square(a), 0.5)) * b),
        "scale": lambda a, b: T.sum(T.scale(a, 2.5) * b),
        "exp": lambda a, b: T.sum(T.exp(a) * b),
        "sqrt": lambda a, b: T.sum(T.sqrt(T.add(T.square(a), 1.0)) * b),
        "layer_norm": lambda a, b: T.sum(T.layer_norm(a, b, b) * T.Tensor(np.arange(12.0).reshape(3, 4))),
        "softmax": lambda a, b: T.sum(T.softmax(a, -1) * T.Tensor(np.arange(12.0).reshape(3, 4))),
    }
    assert T.grad_check(fns[op], [x, y]) < 1e-4


# -- reductions ----------------------------------------------------------------

def test_reductions():
    assert T.mean(T.Tensor([[1.0, 3.0], [5.0, 7.0]])).item() == 4
    assert T.sum(T.Tensor([[1.0, 2.0]]), axis=1).data.tolist() == [3]


def test_mean_gradient_is_one_over_n():
    x = f64(np.ones((2, 5)))
    T.backward(T.mean(x))
    assert np.all(x.grad == 1 / 10)


# -- structural ----------------------------------------------------------------

def test_concat_orders_refs_first():
    z_ref = T.full([2, 3], 1.0)
    z_shot = T.full([3, 3], 2.0)
    z = T.concat([z_ref, z_shot], axis=0)
    assert z.shape == (5, 3)
    assert np.all(z.data[:2] == 1) and np.all(z.data[2:] == 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), perm=st.permutations([0, 1, 2]))
def test_reshape_transpose_roundtrip(seed, perm):
    x = T.Tensor(T.normal(T.make_rng(seed), (2, 3, 4)))
    assert np.array_equal(T.reshape(T.reshape(x, (4, 6)), (2, 3, 4)).data, x.data)
    inv = list(np.argsort(perm))
    assert np.array_equal(T.transpose(T.transpose(x, perm), inv).data, x.data)


def test_masked_softmax_entries_vanish():
    logits = T.Tensor([0.3, -1.2, 2.0, 0.7])
    masked = T.masked_fill(logits, np.array([False, True, False, True]))
    p = T.softmax(masked).data
    assert p[1] < 1e-30 and p[3] < 1e-30
    assert abs(p.sum() - 1) < 1e-6


def test_slice_range_error():
    with pytest.raises(RangeError):
        T.slice(T.zeros([4, 2]), ((2, 5),))


@pytest.mark.parametrize("seed", range(5))
def test_structural_grads(seed):
    x = rand64((4, 6), seed)
    w = T.Tensor(np.arange(24.0).reshape(4, 6) % 5)

    def f(a):
        parts = T.concat([T.slice(a, ((0, 2),)), T.slice(a, ((2, 4),))], axis=0)
        t = T.transpose(T.reshape(parts, (6, 4)), (1, 0))
        g = T.take(t, [0, 2, 2], axis=0)
        m = T.masked_fill(a, (np.arange(24).reshape(4, 6) % 3) == 0, 0.0)
        return T.sum(T.square(g)) + T.sum(m * w)

    assert T.grad_check(f, [x]) < 1e-4


# -- backward --------------------------------------------------------------------

def test_backward_square_sum():
    x = f64([1.0, 2.0])
    T.backward(T.sum(x * x))
    assert x.grad.tolist() == [2, 4]


def test_unused_input_gets_zero_grad():
    x, y = f64([1.0, 2.0]), f64([3.0])
    with T.Tape():
        T.backward(T.sum(x * x))
    assert y.grad is None or np.all(y.grad == 0)


def test_backward_requires_scalar():
    x = f64([1.0, 2.0])
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_second_backward_without_reset_errors():
    x = f64([1.0, 2.0])
    with T.Tape() as tape:
        loss = T.sum(x * x)
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)
        tape.reset()
        T.backward(T.sum(x))
    assert x.grad.tolist() == [3, 5]


def test_softmax_matmul_composite_grad():
    q, k = rand64((3, 4), 11), rand64((5, 4), 12)
    v = rand64((5, 2), 13)
    f = lambda a, b, c: T.sum(T.square(T.softmax(a @ T.transpose(b, (1, 0)), -1) @ c))
    assert T.grad_check(f, [q, k, v]) < 1e-5


# -- grad_check harness ------------------------------------------------------------

def test_grad_check_linear_is_exact():
    x = rand64((6,), 5)
    w = T.Tensor(np.linspace(-1, 1, 6))
    assert T.grad_check(lambda a: T.sum(a * w), [x]) <= 1e-9


def test_grad_check_detects_corrupted_gradient():
    def bad_square(a):
        d = a.data
        return T.custom_op("bad_square", d * d, (a,), lambda g: (1.1 * 2 * g * d,))

    x = rand64((5,), 6)
    assert T.grad_check(lambda a: T.sum(bad_square(a)), [x]) > 1e-2


def test_grad_check_requires_float64():
    with pytest.raises(ContractError):
        T.grad_check(lambda a: T.sum(a), [T.zeros([2], requires_grad=True)])


# -- DSTN ----------------------------------------------------------------------------

@pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.float64, 1)])
def test_dstn_roundtrip_and_header(dtype, code, tmp_path):
    arr = np.arange(6, dtype=dtype).reshape(2, 3)
    buf = to_bytes(arr)
    assert buf[:4] == b"DSTN" and buf[4] == 1 and buf[5] == code and buf[6] == 2
    assert int.from_bytes(buf[7:11], "little") == 2 and int.from_bytes(buf[11:15], "little") == 3
    back = from_bytes(buf)
    assert back.dtype == dtype and np.array_equal(back, arr)
    T.save_tensor(tmp_path / "a.dstn", arr)
    assert np.array_equal(T.load_tensor(tmp_path / "a.dstn"), arr)
