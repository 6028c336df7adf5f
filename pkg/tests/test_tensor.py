"""Tensor arithmetic, the tape, and the finite-difference oracle."""

import numpy as np
import numpy.testing as npt
import pytest

from trifusion.errors import ContractError, NumericError, ShapeError
from trifusion.tensor import (Parameter, Tape, Tensor, add, expand_batch,
                              finite_diff_check, matmul, mul_elementwise,
                              narrow, reshape, scale, softmax, sub,
                              tensor_sum, transpose)


class TestElementwise:
    def test_add_identity(self):
        npt.assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data,
                               [1.0, 2.0])

    def test_mul_hand_values(self):
        npt.assert_array_equal(
            mul_elementwise(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data,
            [8.0, 15.0])

    def test_add_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_scalar_and_suffix_broadcast(self):
        npt.assert_array_equal(add(Tensor([1.0, 2.0]), 1.5).data, [2.5, 3.5])
        x = Tensor(np.zeros((2, 3)))
        b = Tensor([1.0, 2.0, 3.0])
        npt.assert_array_equal(add(x, b).data, [[1, 2, 3], [1, 2, 3]])

    def test_sub_scale(self):
        npt.assert_array_equal(sub(Tensor([3.0]), Tensor([1.0])).data, [2.0])
        npt.assert_array_equal(scale(Tensor([3.0]), -2.0).data, [-6.0])


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        npt.assert_array_equal(matmul(eye, b).data, b.data)

    def test_hand_values(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_array_equal(out.data, [[11.0]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = rng.normal(size=(8, 8))
            b = rng.normal(size=(8, 8))
            want = np.zeros((8, 8))
            for i in range(8):
                for j in range(8):
                    for k in range(8):
                        want[i, j] += a[i, k] * b[k, j]
            got = matmul(Tensor(a), Tensor(b)).data
            assert np.abs(got - want).max() <= 1e-12 * np.abs(want).max()

    def test_batched_and_shared(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        npt.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)
        w = rng.normal(size=(5, 2))
        npt.assert_allclose(matmul(Tensor(a), Tensor(w)).data, a @ w)
        with pytest.raises(ShapeError):
            matmul(Tensor(rng.normal(size=(2, 3, 5))),
                   Tensor(rng.normal(size=(4, 5, 2))))


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([3.7, 3.7, 3.7, 3.7]))
        npt.assert_allclose(out.data, 0.25)

    def test_analytic_closed_form(self):
        out = softmax(Tensor([0.0, np.log(3.0)]))
        npt.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_stability_limit(self):
        out = softmax(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        npt.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one_large_magnitudes(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.uniform(-1e3, 1e3, size=(4, 9))
            out = softmax(Tensor(x), axis=-1)
            npt.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
            # entries far below the row max underflow to exactly 0.0
            assert (out.data >= 0).all() and (out.data <= 1).all()

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            softmax(Tensor([np.nan, 1.0]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            tape.backward(tensor_sum(x))
        npt.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum_hand_derivative(self):
        x = Parameter([1.0, 2.0])
        with Tape() as tape:
            tape.backward(tensor_sum(mul_elementwise(x, x)))
        npt.assert_array_equal(x.grad, [2.0, 4.0])

    def test_value_used_twice_accumulates(self):
        x = Parameter([5.0])
        with Tape() as tape:
            tape.backward(tensor_sum(add(x, x)))
        npt.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        x = Parameter([1.0, 2.0])
        with Tape() as tape:
            y = add(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_empty_tape_rejected(self):
        with pytest.raises(ContractError):
            Tape().backward(Tensor([1.0]))

    def test_backward_twice_doubles_gradients(self):
        x = Parameter([1.0, 3.0])
        with Tape() as tape:
            y = tensor_sum(mul_elementwise(x, x))
            tape.backward(y)
            once = x.grad.copy()
            tape.backward(y)
        npt.assert_array_equal(x.grad, 2 * once)

    def test_no_recording_without_tape(self):
        x = Parameter([1.0])
        y = mul_elementwise(x, x)
        assert y.requires_grad is False


class TestShapeOps:
    def test_reshape_transpose_roundtrip(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        y = transpose(reshape(x, (6, 4)), (1, 0))
        assert y.shape == (4, 6)
        npt.assert_array_equal(y.data, x.data.reshape(6, 4).T)

    def test_narrow_bounds(self):
        x = Tensor(np.arange(10.0).reshape(2, 5))
        npt.assert_array_equal(narrow(x, 1, 1, 2).data, [[1, 2], [6, 7]])
        with pytest.raises(ShapeError):
            narrow(x, 1, 4, 3)

    def test_expand_batch_backward_sums(self):
        x = Parameter(np.ones((1, 3)))
        with Tape() as tape:
            tape.backward(tensor_sum(expand_batch(x, 4)))
        npt.assert_array_equal(x.grad, np.full((1, 3), 4.0))


class TestFiniteDiff:
    def test_linear_function_nearly_exact(self):
        rng = np.random.default_rng(4)
        err = finite_diff_check(tensor_sum, Tensor(rng.normal(size=(3, 4))))
        assert err <= 1e-10

    def test_softmax_sum_is_constant(self):
        rng = np.random.default_rng(5)
        err = finite_diff_check(lambda x: tensor_sum(softmax(x)),
                                Tensor(rng.normal(size=6)))
        assert err <= 1e-8

    def test_cross_entropy_of_softmax(self):
        from trifusion.train import one_hot, softmax_cross_entropy
        rng = np.random.default_rng(6)
        labels = one_hot(np.array([2]), 4)
        x = Tensor(rng.normal(size=(1, 4)))
        err = finite_diff_check(
            lambda v: softmax_cross_entropy(v, labels), x)
        assert err <= 1e-4

    def test_every_op_small_random_tensors(self):
        """Differentiable-op property: FD error <= 1e-4 on <=64 elements."""
        from trifusion.gradcheck import run_gradcheck
        for result in run_gradcheck("ops", seed=11):
            assert result.max_err <= 1e-4, result.name

    def test_bad_eps_rejected(self):
        with pytest.raises(ContractError):
            finite_diff_check(tensor_sum, Tensor([1.0]), eps=0.0)
