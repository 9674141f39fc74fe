import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dlab import numeric as nm
from dlab.errors import NumericError, ParameterError, ShapeError
from dlab.numeric import Tensor
from dlab.objectives import (
    DistillConfig,
    combined_loss,
    contrastive_loss,
    distill_loss,
    row_entropy,
    similarity_logits,
    teacher_distribution,
)


def square(n):
    return arrays(np.float64, (n, n), elements=st.floats(-1, 1))


def test_similarity_identity():
    e = np.eye(3)
    assert np.array_equal(similarity_logits(e, e).value, np.eye(3))


def test_similarity_hand_dot():
    v = np.array([[1.0, 0.0], [0.6, 0.8]])
    s = similarity_logits(v, v).value
    assert s[0, 1] == pytest.approx(0.6) and s[1, 0] == pytest.approx(0.6)


@settings(max_examples=50)
@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)).filter(lambda m: np.all(np.abs(m).sum(axis=1) > 1e-3)))
def test_similarity_bounded_for_unit_rows(m):
    u = nm.l2_normalize_rows(m)
    s = similarity_logits(u, u).value
    assert np.all(np.abs(s) <= 1 + 1e-9)


def test_contrastive_single_sentence_is_zero():
    assert contrastive_loss([[0.7]], 0.05).item() == 0.0


def test_contrastive_two_sentences():
    loss = contrastive_loss([[1.0, 0.0], [0.0, 1.0]], 0.05).item()
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


@pytest.mark.parametrize("n", [2, 5, 64])
def test_contrastive_uniform_logits(n):
    assert contrastive_loss(np.full((n, n), 0.3), 0.05).item() == pytest.approx(math.log(n), abs=1e-12)


@given(square(4), arrays(np.float64, (4, 1), elements=st.floats(-5, 5)))
def test_contrastive_row_shift_invariant(s, c):
    np.testing.assert_allclose(contrastive_loss(s + c, 0.1).item(), contrastive_loss(s, 0.1).item(), atol=1e-9)


def test_contrastive_matches_loop():
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, size=(5, 5))
    tau = 0.05
    total = 0.0
    for i in range(5):
        denom = sum(math.exp(s[i, j] / tau) for j in range(5))
        total += -math.log(math.exp(s[i, i] / tau) / denom)
    assert contrastive_loss(s, tau).item() == pytest.approx(total / 5, rel=1e-12)


def test_distill_uniform_rows():
    assert distill_loss(np.zeros((4, 4)), np.ones((4, 4)), 0.02, 0.01).item() == pytest.approx(math.log(3))


def _loop_distill(s, t, tau_s, tau_t):
    n = len(s)
    total = 0.0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        zt = sum(math.exp(t[i, j] / tau_t) for j in others)
        zs = sum(math.exp(s[i, j] / tau_s) for j in others)
        for j in others:
            q = math.exp(t[i, j] / tau_t) / zt
            total -= q * math.log(math.exp(s[i, j] / tau_s) / zs)
    return total / n


def test_distill_matches_loop():
    rng = np.random.default_rng(4)
    s = rng.uniform(-1, 1, size=(4, 4))
    t = rng.uniform(-1, 1, size=(4, 4))
    assert distill_loss(s, t, 0.02, 0.01).item() == pytest.approx(_loop_distill(s, t, 0.02, 0.01), abs=1e-10)


def test_distill_fixed_point():
    rng = np.random.default_rng(2)
    t = rng.uniform(-1, 1, size=(6, 6))
    s = Tensor(t.copy(), requires_grad=True)
    loss = distill_loss(s, t, 0.05, 0.05)
    assert loss.item() == pytest.approx(row_entropy(t, 0.05).mean(), abs=1e-12)
    g = nm.backward(loss)[s]
    assert np.linalg.norm(g) <= 1e-8


def test_distill_ignores_diagonal():
    rng = np.random.default_rng(1)
    s = rng.uniform(-1, 1, size=(4, 4))
    t = rng.uniform(-1, 1, size=(4, 4))
    s2, t2 = s.copy(), t.copy()
    np.fill_diagonal(s2, 9.0)
    np.fill_diagonal(t2, -9.0)
    assert distill_loss(s2, t2).item() == pytest.approx(distill_loss(s, t).item(), abs=1e-12)


@settings(max_examples=60)
@given(square(5), square(5), st.floats(0.01, 1), st.floats(0.01, 1))
def test_distill_gibbs_bound(s, t, tau_s, tau_t):
    assert distill_loss(s, t, tau_s, tau_t).item() >= row_entropy(t, tau_t).mean() - 1e-9


@settings(max_examples=40)
@given(square(5), square(5), st.randoms(use_true_random=False))
def test_distill_permutation_invariance(s, t, rnd):
    n = 5
    s2, t2 = s.copy(), t.copy()
    for i in range(n):
        cols = [j for j in range(n) if j != i]
        perm = cols[:]
        rnd.shuffle(perm)
        s2[i, cols] = s[i, perm]
        t2[i, cols] = t[i, perm]
    np.testing.assert_allclose(distill_loss(s2, t2).item(), distill_loss(s, t).item(), rtol=1e-10, atol=1e-10)


def test_distill_teacher_gets_no_gradient():
    t = Tensor(np.eye(3) * 0.5, requires_grad=True)
    s = Tensor(np.ones((3, 3)) * 0.1, requires_grad=True)
    grads = nm.backward(distill_loss(s, t))
    assert t not in grads


def test_distill_needs_two_sentences():
    with pytest.raises(ShapeError):
        distill_loss([[1.0]], [[1.0]])


def test_teacher_distribution_rows_sum_to_one():
    q = teacher_distribution(np.random.default_rng(0).uniform(-1, 1, (5, 5)), 0.01)
    np.testing.assert_allclose(q.sum(axis=1), 1.0)
    assert np.all(np.diag(q) == 0.0)


def test_combined():
    cl = Tensor([[1.25]])
    assert combined_loss(cl, Tensor([[7.0]]), 0.0) is cl
    assert combined_loss(1.0, 2.0, 1.0) == 3.0
    assert combined_loss(Tensor([[1.0]]), Tensor([[2.0]]), 0.5).item() == 2.0


def test_combined_rejects_bad_inputs():
    with pytest.raises(ParameterError):
        combined_loss(1.0, 1.0, -1.0)
    with pytest.raises(NumericError):
        combined_loss(float("nan"), 1.0, 1.0)


def test_default_config():
    cfg = DistillConfig()
    assert (cfg.tau, cfg.lam, cfg.batch_size) == (0.05, 1.0, 64)


@pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"tau_s": -1.0}, {"p": 0.0}, {"p": 1.5}, {"lam": -0.1}, {"batch_size": 1}])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        DistillConfig(**kwargs)
