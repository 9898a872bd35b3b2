import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from shrinknet.tensor import (
    Tape,
    Tensor,
    backward,
    broadcast_shape,
    ew_apply,
    matmul,
    monitoring_kinks,
    reduce_mean,
    reduce_sum,
    reshape,
    set_check_finite,
    transpose,
)
from shrinknet.util import ContractError, DimensionError


def _grad_of(fn, *values):
    leaves = [Tensor(v, requires_grad=True) for v in values]
    tape = Tape()
    with tape.recording():
        loss = fn(*leaves)
    backward(loss, tape)
    return [leaf.grad for leaf in leaves]


def test_ew_apply_examples() -> None:
    assert ew_apply("add", Tensor([1, 2]), Tensor([3, 4])).values.tolist() == [4, 6]
    assert ew_apply("abs", Tensor([-2, 0, 3])).values.tolist() == [2, 0, 3]
    assert ew_apply("sigmoid", Tensor([0.0])).values.tolist() == [0.5]
    assert ew_apply("negate", Tensor([1.5])).values.tolist() == [-1.5]
    assert ew_apply("relu", Tensor([-1.0, 2.0])).values.tolist() == [0.0, 2.0]


def test_sigmoid_is_stable_for_large_inputs() -> None:
    out = ew_apply("sigmoid", Tensor([-1000.0, 1000.0])).values
    assert out.tolist() == [0.0, 1.0]


def test_per_channel_broadcast() -> None:
    x = Tensor(np.ones((2, 3, 4)))
    scale = Tensor(np.arange(6.0).reshape(2, 3, 1))
    out = x * scale
    assert out.shape == (2, 3, 4)
    assert_array_equal(out.values[1, 2], [5.0, 5.0, 5.0, 5.0])
    assert (Tensor([1.0, 2.0]) + 1).values.tolist() == [2.0, 3.0]


def test_shape_mismatch_names_both_shapes() -> None:
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[4\]"):
        ew_apply("mul", Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        broadcast_shape((2, 3, 4), (3, 3, 1))


def test_unary_op_rejects_second_operand() -> None:
    with pytest.raises(ContractError):
        ew_apply("abs", Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ContractError):
        ew_apply("add", Tensor([1.0]))


def test_matmul_examples() -> None:
    m = Tensor([[1, 2], [3, 4]])
    assert matmul(Tensor(np.eye(2)), m).values.tolist() == [[1, 2], [3, 4]]
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).values.tolist() == [[11]]


def test_matmul_matches_triple_loop() -> None:
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        assert_allclose(matmul(Tensor(a), Tensor(b)).values, expected, rtol=0, atol=1e-12)


def test_matmul_rejects_bad_shapes() -> None:
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_reduce_mean_examples() -> None:
    assert reduce_mean(Tensor([2, 4, 6]), [0]).item() == 4
    c = reduce_mean(Tensor(np.full((3, 5), 2.5)), [0, 1])
    assert c.item() == 2.5
    (grad,) = _grad_of(lambda x: reduce_mean(x, [0]), np.arange(4.0))
    assert_array_equal(grad, [0.25] * 4)


def test_reduce_mean_keeps_unreduced_axes() -> None:
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    assert reduce_mean(x, [-1]).shape == (2, 3)
    assert reduce_mean(x, [0, 2]).shape == (3,)


@pytest.mark.parametrize("axes", [[3], [-4], [1, 1], [0, -3], []])
def test_reduce_mean_invalid_axes(axes) -> None:
    with pytest.raises(DimensionError):
        reduce_mean(Tensor(np.ones((2, 3, 4))), axes)


def test_backward_examples() -> None:
    (grad,) = _grad_of(lambda x: x * x, 3.0)
    assert grad.tolist() == 6.0
    (grad,) = _grad_of(lambda x: reduce_sum(x.relu(), [0]), [-1.0, 2.0])
    assert grad.tolist() == [0.0, 1.0]


def test_backward_through_shared_subexpression() -> None:
    # y = x*x is consumed twice; both contributions must add up.
    (grad,) = _grad_of(lambda x: (lambda y: y * y + y)(x * x), 2.0)
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert grad.tolist() == 36.0


def test_backward_of_mean_of_matvec_matches_finite_differences() -> None:
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4))
    v = rng.normal(size=(4, 1))
    (grad,) = _grad_of(lambda w_: reduce_mean(matmul(w_, Tensor(v)), [0, 1]), w)
    eps = 1e-5
    for idx in np.ndindex(w.shape):
        plus, minus = w.copy(), w.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric = ((plus @ v).mean() - (minus @ v).mean()) / (2 * eps)
        assert abs(grad[idx] - numeric) <= 1e-6 * max(abs(numeric), 1e-8)


def test_backward_is_linear() -> None:
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(2, 3))
    m = Tensor(rng.normal(size=(3, 2)))

    def f(x):
        return reduce_mean(matmul(x, m), [0, 1])

    def g(x):
        return reduce_sum(x * x, [0, 1])

    (gf,) = _grad_of(f, x0)
    (gg,) = _grad_of(g, x0)
    (combined,) = _grad_of(lambda x: f(x) * 2.5 + g(x) * -0.5, x0)
    assert_allclose(combined, 2.5 * gf - 0.5 * gg, rtol=1e-12, atol=1e-12)


def test_untouched_leaves_get_zero_gradients_and_tape_is_cleared() -> None:
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([5.0], requires_grad=True)
    tape = Tape()
    with tape.recording():
        _ = a * b
        loss = reduce_sum(a, [0])
    backward(loss, tape)
    assert a.grad.tolist() == [1.0, 1.0]
    assert b.grad.tolist() == [0.0]
    assert len(tape) == 0


def test_backward_rejects_non_scalar_loss() -> None:
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with tape.recording():
        y = x * x
    with pytest.raises(ContractError, match="scalar"):
        backward(y, tape)


def test_backward_rejects_empty_tape() -> None:
    with pytest.raises(ContractError, match="empty"):
        backward(Tensor(1.0), Tape())


def test_backward_rejects_loss_that_is_not_final() -> None:
    x = Tensor(2.0, requires_grad=True)
    tape = Tape()
    with tape.recording():
        loss = x * x
        _ = x + 1
    with pytest.raises(ContractError, match="final"):
        backward(loss, tape)


def test_operations_outside_a_tape_are_not_recorded() -> None:
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    assert y.node_id is None


def test_values_are_read_only() -> None:
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.values[0] = 5.0


def test_assign_only_on_trainable_leaves() -> None:
    with pytest.raises(ContractError):
        Tensor([1.0]).assign([2.0])
    w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    w.assign([3.0, 4.0])
    assert w.values.tolist() == [3.0, 4.0]
    with pytest.raises(DimensionError, match="w"):
        w.assign([1.0])


def test_reshape_and_transpose_gradients() -> None:
    (grad,) = _grad_of(
        lambda x: reduce_sum(transpose(reshape(x, (2, 3))) * Tensor(np.arange(6.0).reshape(3, 2)), [0, 1]),
        np.ones(6),
    )
    assert grad.tolist() == [0.0, 2.0, 4.0, 1.0, 3.0, 5.0]
    with pytest.raises(DimensionError):
        reshape(Tensor(np.ones(6)), (4, 2))


def test_forward_is_bitwise_deterministic() -> None:
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    first = reduce_mean(matmul(Tensor(a), Tensor(b)).sigmoid(), [1]).values
    second = reduce_mean(matmul(Tensor(a), Tensor(b)).sigmoid(), [1]).values
    assert first.tobytes() == second.tobytes()


def test_finite_check_flags_overflow() -> None:
    set_check_finite(True)
    with pytest.raises(ContractError, match="non-finite"):
        Tensor([1e200]) * Tensor([1e200])


def test_float32_values_stay_float32() -> None:
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64


def test_kink_monitor_records_branches() -> None:
    with monitoring_kinks() as first:
        Tensor([-1.0, 2.0]).relu()
    with monitoring_kinks() as second:
        Tensor([-0.5, 3.0]).relu()
    with monitoring_kinks() as third:
        Tensor([0.5, 3.0]).relu()
    assert first.same_branches(second)
    assert not first.same_branches(third)
