import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dlab import numeric as nm
from dlab.errors import ContractError, DegenerateEmbeddingError, NumericError, ShapeError
from dlab.numeric import Tensor


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nm.matmul(np.eye(2), m).value, m)


def test_matmul_hand_oracle():
    out = nm.matmul([[1, 2], [3, 4]], [[5], [6]]).value
    # 1*5 + 2*6, 3*5 + 4*6
    assert out.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match="2x3.*2x3"):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_normalize_rows():
    assert np.array_equal(nm.l2_normalize_rows([[1.0, 0.0, 0.0]]).value, [[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(nm.l2_normalize_rows([[3.0, 4.0]]).value, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_normalize_zero_row():
    with pytest.raises(DegenerateEmbeddingError) as err:
        nm.l2_normalize_rows([[1.0, 1.0], [0.0, 0.0]])
    assert err.value.row == 1


def test_softmax_row_values():
    np.testing.assert_allclose(nm.softmax_row([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(nm.softmax_row([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)),
       st.floats(-100, 100), st.floats(0.01, 5))
def test_softmax_shift_invariance(v, c, tau):
    np.testing.assert_allclose(nm.softmax_row(v + c, tau), nm.softmax_row(v, tau), atol=1e-12)


def test_softmax_large_logits_stay_finite():
    p = nm.softmax_row([1000.0, 0.0, -1000.0], 0.01)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_masked_softmax_excludes_entries():
    m = np.array([[True, False, True]])
    p = nm.softmax_rows([[0.0, 50.0, 0.0]], 1.0, m).value
    np.testing.assert_allclose(p, [[0.5, 0.0, 0.5]])


def test_backward_square():
    x = Tensor([[3.0]], requires_grad=True)
    grads = nm.backward(nm.mul(x, x))
    assert grads[x][0, 0] == 6.0


def test_backward_shared_subexpression():
    x = Tensor([[2.0]], requires_grad=True)
    y = nm.add(x, x)
    z = nm.mul(y, y)  # 4x^2 -> 8x
    assert nm.backward(z)[x][0, 0] == 16.0


def test_backward_needs_scalar_root():
    with pytest.raises(ContractError):
        nm.backward(Tensor(np.ones((2, 2)), requires_grad=True))


def test_backward_detects_cycle():
    a = Tensor([[1.0]], requires_grad=True)
    b = nm.scale(a, 2.0)
    c = nm.scale(b, 3.0)
    b.parents = (c,)  # test double: splice in a back edge
    with pytest.raises(ContractError, match="cycle"):
        nm.backward(c)


def test_unreachable_leaf_gets_zero_adjoint():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[5.0, 5.0]], requires_grad=True)
    # b is reachable only through a zero multiplier
    loss = nm.total(nm.add(a, nm.scale(b, 0.0)))
    grads = nm.backward(loss)
    assert np.array_equal(grads[b], np.zeros((1, 2)))
    assert np.array_equal(grads[a], np.ones((1, 2)))


def test_log_of_nonpositive_rejected():
    with pytest.raises(NumericError):
        nm.log([[0.0]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_flagged():
    with pytest.raises(NumericError):
        nm.scale([[1e308]], 10.0)


def test_finite_diff_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 2))
    err = nm.finite_diff_check(lambda ps: nm.total(nm.mul(ps[0], ps[0])), [a], step=1e-5)
    assert err <= 1e-7


def test_finite_diff_detects_negated_gradient():
    a = np.array([[0.3, -1.2], [2.0, 0.7]])

    def objective(ps):
        return nm.total(nm.mul(ps[0], ps[0]))

    err = nm.finite_diff_check(objective, [a], grad_fn=lambda ps: [-2.0 * ps[0]])
    assert err == pytest.approx(2.0, abs=1e-6)


def _random_graph_objective(ps):
    w, x = ps
    h = nm.tanh(nm.matmul(x, w))
    z = nm.l2_normalize_rows(h)
    s = nm.matmul(z, nm.transpose(z))
    return nm.total(nm.log_softmax_rows(s, 0.5))


def test_finite_diff_on_composite_graph():
    rng = np.random.default_rng(3)
    err = nm.finite_diff_check(_random_graph_objective, [rng.normal(size=(4, 3)), rng.normal(size=(5, 4))])
    assert err <= 1e-6


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    mask = ~np.eye(3, 4, dtype=bool)
    err = nm.finite_diff_check(lambda ps: nm.total(nm.mul(nm.softmax_rows(ps[0], 0.7, mask), Tensor(w))), [a])
    assert err <= 1e-6


def test_row_broadcast_add_gradient():
    rng = np.random.default_rng(2)
    err = nm.finite_diff_check(
        lambda ps: nm.total(nm.tanh(nm.add(ps[0], ps[1]))), [rng.normal(size=(4, 3)), rng.normal(size=(1, 3))]
    )
    assert err <= 1e-7


def test_dropout_apply_scales_kept_entries():
    keep = np.array([[True, False], [True, True]])
    out = nm.dropout_apply(np.ones((2, 2)), keep, 0.5).value
    assert out.tolist() == [[2.0, 0.0], [2.0, 2.0]]


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-1e6, 1e6)))
def test_matrix_round_trip(m):
    buf = io.BytesIO(nm.matrix_to_bytes(m))
    assert np.array_equal(nm.read_matrix(buf), m)


def test_matrix_header_layout():
    blob = nm.matrix_to_bytes([[1.0, 2.0, 3.0]])
    assert blob[:4] == b"DLAB"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:16], "little") == 1
    assert int.from_bytes(blob[16:24], "little") == 3
    assert np.frombuffer(blob[24:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_read_matrix_rejects_bad_magic():
    with pytest.raises(ShapeError):
        nm.read_matrix(io.BytesIO(b"XXXX" + bytes(20)))
