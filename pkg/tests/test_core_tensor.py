import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crayonlm.core import backward, embedding, linear, matmul, no_grad, tensor
from crayonlm.core.functional import gelu, masked_cross_entropy, softmax
from crayonlm.core.gradcheck import FD_STEP, gradcheck
from crayonlm.core.tensor import add_rows
from crayonlm.errors import EmptyLossError, ShapeError, TapeStateError

from .gradcases import PRIMITIVES


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def test_matmul_identity():
    a = tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    out = matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((4, 5)), r.standard_normal((5, 3))
    out = matmul(tensor(a, dtype=np.float64), tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(out, triple_loop(a, b), atol=1e-6)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_default_dtype_is_float32():
    assert tensor([1, 2, 3]).dtype == np.float32
    assert tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_gelu_fixed_points():
    assert gelu(tensor([0.0])).data[0] == 0.0
    assert abs(float(gelu(tensor([10.0], dtype=np.float64)).data[0]) - 10.0) < 1e-6


def test_gelu_one_matches_high_precision_erf():
    with mpmath.workdps(40):
        ref = float(1 * (1 + mpmath.erf(1 / mpmath.sqrt(2))) / 2)
    assert abs(float(gelu(tensor([1.0], dtype=np.float64)).data[0]) - ref) < 1e-12


def test_cross_entropy_uniform_is_log_v():
    V = 7
    loss = masked_cross_entropy(tensor(np.zeros((3, V))), np.array([0, 4, 6]), np.array([False, True, False]))
    assert abs(float(loss.data) - math.log(V)) < 1e-6


def test_cross_entropy_confident_correct_is_zero():
    logits = np.full((2, 5), -1e4, dtype=np.float32)
    logits[0, 3] = logits[1, 1] = 1e4
    loss = masked_cross_entropy(tensor(logits), np.array([3, 1]), np.array([True, True]))
    assert float(loss.data) == 0.0


def test_cross_entropy_ignores_unmasked_targets(rng):
    logits = tensor(rng.standard_normal((6, 9)))
    mask = np.array([True, False, True, False, False, True])
    t1 = rng.integers(0, 9, 6)
    t2 = t1.copy()
    t2[~mask] = (t2[~mask] + 3) % 9
    assert masked_cross_entropy(logits, t1, mask).data.tobytes() == masked_cross_entropy(logits, t2, mask).data.tobytes()


def test_cross_entropy_empty_mask():
    with pytest.raises(EmptyLossError):
        masked_cross_entropy(tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([False, False]))


def test_cross_entropy_matches_scalar_reference(rng):
    logits = rng.standard_normal((2, 3, 5))
    targets = rng.integers(0, 5, (2, 3))
    mask = np.array([[True, False, True], [False, True, True]])
    ref, n = 0.0, 0
    for b in range(2):
        for t in range(3):
            if mask[b, t]:
                row = logits[b, t]
                ref -= row[targets[b, t]] - math.log(sum(math.exp(v) for v in row))
                n += 1
    got = masked_cross_entropy(tensor(logits, dtype=np.float64), targets, mask).data
    assert abs(float(got) - ref / n) < 1e-12


def test_backward_sum_and_square():
    x = tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((y * y).sum())
    np.testing.assert_array_equal(y.grad, [2, 4, 6])


def test_double_backward_raises():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(TapeStateError):
        backward(loss)


def test_backward_needs_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_shared_subexpression_accumulates():
    x = tensor([2.0], requires_grad=True, dtype=np.float64)
    y = x * x
    backward((y + y * x).sum())  # 2x^2 ... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(4 + 12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    p = softmax(tensor(np.array(vals, dtype=np.float64))).data
    assert abs(p.sum() - 1) < 1e-6
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_strictly_inside_unit_interval(rng):
    p = softmax(tensor(rng.standard_normal((4, 6)))).data
    assert np.all(p > 0) and np.all(p < 1)
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        embedding(tensor(np.zeros((3, 2))), np.array([0, 3]))


def test_add_rows_touches_only_span(rng):
    x = tensor(rng.standard_normal((2, 6, 3)))
    rows = tensor(rng.standard_normal((2, 2, 3)))
    out = add_rows(x, rows, 2).data
    np.testing.assert_array_equal(out[:, :2], x.data[:, :2])
    np.testing.assert_array_equal(out[:, 4:], x.data[:, 4:])
    np.testing.assert_array_equal(out[:, 2:4], x.data[:, 2:4] + rows.data)


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(3)
        a = tensor(r.standard_normal((5, 4)))
        w = tensor(r.standard_normal((3, 4)))
        return softmax(gelu(linear(a, w))).data.tobytes()
    assert run() == run()


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    r = np.random.default_rng(abs(hash(name)) % 2**32)
    a, b, f = PRIMITIVES[name](r)
    params = [p for p in (a, b) if p is not None]
    ok, worst = gradcheck(f, params, h=FD_STEP, rtol=1e-3)
    assert ok, f"{name}: worst ratio {worst}"
