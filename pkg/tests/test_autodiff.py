"""Finite-difference verification of every differentiable operation."""
import numpy as np
import pytest

from speechcot import autodiff as ad
from speechcot.autodiff import Tensor, grad_check, no_grad
from speechcot.errors import (
    AttentionDegeneracyError,
    DegenerateBatchError,
    OracleError,
    ParameterError,
    ShapeError,
    VocabularyError,
)

TOL = 1e-4


def _param(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _sum_all(t: Tensor) -> Tensor:
    flat = ad.reshape(t, (1, int(np.prod(t.data.shape))))
    ones = Tensor(np.ones((flat.data.shape[1], 1)))
    return ad.reshape(ad.matmul(flat, ones), ())


def _weighted_sum(rng, t: Tensor) -> Tensor:
    # random weights make asymmetric gradients visible
    w = Tensor(rng.standard_normal(t.data.shape))
    return _sum_all(ad.mul(t, w))


def test_matmul_grad():
    rng = np.random.default_rng(10)
    a = _param(rng, (3, 4))
    b = _param(rng, (4, 5))
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(0),
                                           ad.matmul(a, b)), {"a": a, "b": b})
    assert err < TOL, f"matmul gradient error {err}"


def test_matmul_batched_grad():
    rng = np.random.default_rng(11)
    a = _param(rng, (2, 3, 4))
    b = _param(rng, (2, 4, 5))
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(1),
                                           ad.matmul(a, b)), {"a": a, "b": b})
    assert err < TOL


def test_matmul_broadcast_grad():
    rng = np.random.default_rng(12)
    a = _param(rng, (2, 3, 4))
    b = _param(rng, (4, 5))  # broadcast over the batch axis
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(2),
                                           ad.matmul(a, b)), {"a": a, "b": b})
    assert err < TOL


def test_matmul_shape_errors():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.matmul(a, Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ad.matmul(a, Tensor(np.ones(3)))  # 1D operands are not supported


def test_add_mul_broadcast_grad():
    rng = np.random.default_rng(13)
    a = _param(rng, (3, 4))
    b = _param(rng, (1, 4))
    c = _param(rng, (3, 1))
    err = grad_check(
        lambda: _weighted_sum(np.random.default_rng(3),
                              ad.mul(ad.add(a, b), c)),
        {"a": a, "b": b, "c": c})
    assert err < TOL


def test_scale_relu_grad():
    # keep every coordinate well clear of the kink so central differences
    # stay on one side of it
    rng = np.random.default_rng(14)
    raw = rng.standard_normal((4, 5))
    raw = np.where(np.abs(raw) < 0.2, 0.5 * np.sign(raw) + raw, raw)
    a = Tensor(raw, requires_grad=True)
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(4),
                                           ad.scale(ad.relu(a), 1.7)),
                     {"a": a})
    assert err < TOL
    # both branches exercised
    out = ad.relu(a)
    assert np.any(out.data == 0.0) and np.any(out.data > 0.0)


def test_reshape_transpose_grad():
    rng = np.random.default_rng(15)
    a = _param(rng, (2, 3, 4))
    def loss():
        t = ad.transpose(a, (1, 0, 2))
        return _weighted_sum(np.random.default_rng(5), ad.reshape(t, (3, 8)))
    assert grad_check(loss, {"a": a}) < TOL


def test_concat_rows_grad():
    rng = np.random.default_rng(16)
    a = _param(rng, (2, 4))
    b = _param(rng, (3, 4))
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(6),
                                           ad.concat_rows([a, b])),
                     {"a": a, "b": b})
    assert err < TOL
    with pytest.raises(ShapeError):
        ad.concat_rows([a, Tensor(np.ones((2, 5)))])


def test_pad_stack_narrow_batch_select_grad():
    rng = np.random.default_rng(17)
    a = _param(rng, (2, 4))
    b = _param(rng, (3, 4))
    def loss():
        stacked = ad.pad_stack([a, b], 3)  # (2, 3, 4)
        picked = ad.batch_select(stacked, 1)
        return _weighted_sum(np.random.default_rng(7), ad.narrow(picked, 0, 2))
    assert grad_check(loss, {"a": a, "b": b}) < TOL


def test_embedding_grad():
    rng = np.random.default_rng(18)
    table = _param(rng, (7, 5))
    ids = np.array([[1, 3, 1], [0, 6, 2]])
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(8),
                                           ad.embedding(table, ids)),
                     {"table": table})
    assert err < TOL
    with pytest.raises(VocabularyError):
        ad.embedding(table, np.array([[7]]))
    with pytest.raises(VocabularyError):
        ad.embedding(table, np.array([[-1]]))


def test_rms_norm_grad():
    rng = np.random.default_rng(19)
    x = _param(rng, (3, 6))
    gamma = _param(rng, 6)
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(9),
                                           ad.rms_norm(x, gamma, 1e-6)),
                     {"x": x, "gamma": gamma})
    assert err < TOL


def test_masked_softmax_grad():
    rng = np.random.default_rng(20)
    scores = _param(rng, (2, 2, 3, 4))
    mask = np.ones((2, 2, 3, 4), dtype=bool)
    mask[0, :, :, 3] = False
    mask[1, :, 1, :2] = False
    err = grad_check(lambda: _weighted_sum(np.random.default_rng(10),
                                           ad.masked_softmax(scores, mask)),
                     {"scores": scores})
    assert err < TOL


def test_masked_softmax_all_masked_row():
    scores = Tensor(np.zeros((1, 1, 2, 3)))
    mask = np.ones((1, 1, 2, 3), dtype=bool)
    mask[0, 0, 1, :] = False
    with pytest.raises(AttentionDegeneracyError):
        ad.masked_softmax(scores, mask)


def test_cross_entropy_grad():
    rng = np.random.default_rng(21)
    logits = _param(rng, (5, 7))
    targets = np.array([0, 3, 6, 2, 2])
    mask = np.array([True, True, False, True, True])
    err = grad_check(lambda: ad.cross_entropy(logits, targets, mask),
                     {"logits": logits})
    assert err < TOL


def test_cross_entropy_masked_rows_zero_grad():
    rng = np.random.default_rng(22)
    logits = _param(rng, (4, 6))
    targets = np.array([1, 2, 3, 4])
    mask = np.array([True, False, True, False])
    loss = ad.cross_entropy(logits, targets, mask)
    loss.backward()
    assert np.all(logits.grad[1] == 0.0), "masked row leaked gradient"
    assert np.all(logits.grad[3] == 0.0)
    assert np.any(logits.grad[0] != 0.0)


def test_cross_entropy_degenerate_batch():
    logits = Tensor(np.zeros((2, 3)), requires_grad=True)
    with pytest.raises(DegenerateBatchError):
        ad.cross_entropy(logits, np.array([0, 1]), np.array([False, False]))


def test_no_grad_blocks_graph():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        out = ad.matmul(a, a)
    assert out._parents == () and out._backward_fn is None


def test_backward_accumulates():
    a = Tensor(np.array([[2.0]]), requires_grad=True)
    out = _sum_all(ad.add(ad.mul(a, a), a))  # a^2 + a -> grad 2a + 1 = 5
    out.backward()
    assert np.allclose(a.grad, [[5.0]])


def test_second_backward_accumulates_again():
    a = Tensor(np.array([[3.0]]), requires_grad=True)
    _sum_all(ad.mul(a, a)).backward()
    first = a.grad.copy()
    _sum_all(ad.mul(a, a)).backward()
    assert np.allclose(a.grad, 2 * first), "grads must accumulate across passes"


def test_grad_check_rejects_bad_perturbation():
    a = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ParameterError):
        grad_check(lambda: _sum_all(ad.reshape(a, (1, 2))), {"a": a},
                   perturbation=1.0)


def test_grad_check_flags_nondeterminism():
    a = Tensor(np.ones((1, 2)), requires_grad=True)
    counter = {"n": 0.0}

    def drifting_loss():
        counter["n"] += 1.0
        return _sum_all(ad.mul(a, Tensor(np.full((1, 2), counter["n"]))))

    with pytest.raises(OracleError):
        grad_check(drifting_loss, {"a": a})


def test_restores_dtype_after_grad_check():
    rng = np.random.default_rng(23)
    a = Tensor(rng.standard_normal((2, 2)).astype(np.float32),
               requires_grad=True)
    grad_check(lambda: _sum_all(ad.mul(a, a)), {"a": a})
    assert a.data.dtype == np.float32, "grad_check must restore float32 params"
