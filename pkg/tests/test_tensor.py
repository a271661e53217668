"""Tensor-engine ops: exact examples, gradients, and invariants."""

import math

import mpmath
import numpy as np
import pytest

from conftest import gradcheck
from vitprune.errors import DimensionError, UsageError
from vitprune.tensor import (Graph, Tensor, add, backward, concat,
                             cross_entropy, gelu, l1_penalty, layer_norm,
                             mac_tally, matmul, mul, narrow, no_grad, reshape,
                             scale_columns, softmax_rows, sum_all,
                             take_columns, transpose)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_computed(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients_vs_finite_differences(self, rng):
        for _ in range(20):
            a = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
            b = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
            gradcheck(lambda: sum_all(matmul(a, b)), [a, b], tol=1e-6)

    def test_batched_against_loop(self, rng):
        a = rng.normal(size=(4, 5, 6))
        b = rng.normal(size=(6, 3))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            assert np.allclose(out[i], a[i] @ b, atol=0, rtol=0)

    def test_batched_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        gradcheck(lambda: sum_all(matmul(a, b)), [a, b], tol=1e-6)
        c = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        d = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
        gradcheck(lambda: sum_all(matmul(c, d)), [c, d], tol=1e-6)


class TestSoftmax:
    def test_uniform_input(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_closed_form(self):
        out = softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_large_inputs_match_arbitrary_precision(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data[0]
        with mpmath.workdps(500):
            e = mpmath.e ** mpmath.mpf(-1000)
            expected = [float(1 / (1 + e)), float(e / (1 + e))]
        assert np.isfinite(out).all()
        assert abs(out[0] - expected[0]) < 1e-15
        assert abs(out[1] - expected[1]) < 1e-15

    def test_rows_sum_to_one(self, rng):
        out = softmax_rows(Tensor(rng.normal(size=(6, 9)) * 10.0))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-12
        assert (out.data >= 0).all()

    def test_permutation_equivariance(self, rng):
        # Exact up to the rounding of the permuted denominator sum.
        x = rng.normal(size=(4, 8))
        perm = rng.permutation(8)
        direct = softmax_rows(Tensor(x[:, perm])).data
        permuted = softmax_rows(Tensor(x)).data[:, perm]
        assert np.allclose(direct, permuted, rtol=1e-14, atol=1e-16)

    def test_gradients(self, rng):
        for _ in range(20):
            x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 5)))
            gradcheck(lambda: sum_all(mul(softmax_rows(x), w)), [x], tol=1e-4)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))
        out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias, eps=1e-6)
        assert np.abs(out.data).max() < 1e-6

    def test_two_point_row(self):
        gain = Tensor(np.ones(2))
        bias = Tensor(np.zeros(2))
        out = layer_norm(Tensor([[1.0, 3.0]]), gain, bias, eps=1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_normalization_statistics(self, rng):
        x = rng.normal(size=(5, 16)) * 3.0 + 2.0
        gain = Tensor(np.ones(16))
        bias = Tensor(np.zeros(16))
        out = layer_norm(Tensor(x), gain, bias, eps=1e-12).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-6

    def test_gradients(self, rng):
        for _ in range(20):
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            gain = Tensor(rng.normal(size=4), requires_grad=True)
            bias = Tensor(rng.normal(size=4), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 4)))
            gradcheck(lambda: sum_all(mul(layer_norm(x, gain, bias, 1e-6), w)),
                      [x, gain, bias], tol=1e-5)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4

    def test_large_negative_vanishes(self):
        assert abs(gelu(Tensor([-10.0])).data[0]) < 1e-4

    def test_gradients(self, rng):
        for _ in range(20):
            x = Tensor(rng.normal(size=(4, 4)) * 2.0, requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)))
            gradcheck(lambda: sum_all(mul(gelu(x), w)), [x], tol=1e-5)


class TestScaleColumns:
    def test_ones_is_bit_exact_identity(self, rng):
        x = rng.normal(size=(5, 7))
        out = scale_columns(Tensor(x), Tensor(np.ones(7)))
        assert np.array_equal(out.data, x)

    def test_zeros(self, rng):
        out = scale_columns(Tensor(rng.normal(size=(5, 7))), Tensor(np.zeros(7)))
        assert np.array_equal(out.data, np.zeros((5, 7)))

    def test_hand_computed(self):
        out = scale_columns(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([2.0, 0.0]))
        assert np.array_equal(out.data, [[2.0, 0.0], [6.0, 0.0]])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            scale_columns(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_gradients_flow_to_both(self, rng):
        for _ in range(20):
            x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
            a = Tensor(rng.normal(size=6), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 6)))
            gradcheck(lambda: sum_all(mul(scale_columns(x, a), w)), [x, a],
                      tol=1e-5)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
        assert abs(loss.item() - math.log(4.0)) < 1e-12

    def test_confident_correct(self):
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        assert cross_entropy(Tensor(logits), [1, 2]).item() < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(UsageError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradients(self, rng):
        for _ in range(20):
            logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
            labels = rng.integers(0, 5, size=3)
            gradcheck(lambda: cross_entropy(logits, labels), [logits], tol=1e-6)


class TestL1Penalty:
    def test_zero_coefficient(self, rng):
        gates = [Tensor(rng.normal(size=5), requires_grad=True)]
        assert l1_penalty(gates, 0.0).item() == 0.0

    def test_hand_computed(self):
        out = l1_penalty([Tensor([1.0, -2.0, 0.0])], 0.1)
        assert abs(out.item() - 0.3) < 1e-15

    def test_subgradient_convention(self):
        g = Tensor([1.0, -2.0, 0.0], requires_grad=True)
        with Graph() as graph:
            loss = l1_penalty([g], 0.1)
        backward(loss, graph)
        assert np.allclose(g.grad, [0.1, -0.1, 0.0], atol=0)

    def test_positive_homogeneity(self, rng):
        gates = [Tensor(rng.normal(size=7)), Tensor(rng.normal(size=3))]
        assert l1_penalty(gates, 0.2).item() == pytest.approx(
            2.0 * l1_penalty(gates, 0.1).item(), rel=1e-15)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Graph() as graph:
            loss = sum_all(p)
        backward(loss, graph)
        assert np.array_equal(p.grad, np.ones((3, 4)))

    def test_chain_rule_by_hand(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Graph() as graph:
            y = mul(x, Tensor(2.0))
            loss = sum_all(mul(y, y))
        backward(loss, graph)
        assert np.allclose(x.grad, 8.0 * x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Graph() as graph:
            y = mul(x, Tensor(2.0))
        with pytest.raises(UsageError):
            backward(y, graph)

    def test_accumulation_over_shared_input(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Graph() as graph:
            loss = sum_all(add(x, x))
        backward(loss, graph)
        assert np.array_equal(x.grad, np.full((2, 2), 2.0))

    def test_no_grad_suppresses_recording(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Graph() as graph:
            with no_grad():
                inner = mul(x, Tensor(3.0))
            loss = sum_all(add(Tensor(inner.data), Tensor(np.zeros((2, 2)))))
        backward(loss, graph)
        assert x.grad is None


class TestStructuralOps:
    def test_narrow_roundtrip_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)))
        gradcheck(lambda: sum_all(mul(narrow(x, -1, 2, 2), w)), [x], tol=1e-6)

    def test_take_columns_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        idx = np.array([0, 3, 5])
        w = Tensor(rng.normal(size=(3, 3)))
        gradcheck(lambda: sum_all(mul(take_columns(x, idx), w)), [x], tol=1e-6)

    def test_concat_gradient(self, rng):
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 6)))
        gradcheck(lambda: sum_all(mul(concat([a, b], axis=-1), w)), [a, b],
                  tol=1e-6)

    def test_transpose_reshape_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 8)))
        gradcheck(
            lambda: sum_all(mul(reshape(transpose(x, (1, 0, 2)), (3, 8)), w)),
            [x], tol=1e-6)

    def test_finite_outputs_on_finite_inputs(self, rng):
        x = Tensor(rng.normal(size=(4, 8)) * 100.0)
        for op in (softmax_rows, gelu,
                   lambda t: layer_norm(t, Tensor(np.ones(8)),
                                        Tensor(np.zeros(8)), 1e-6)):
            assert np.isfinite(op(x).data).all()


def test_mac_tally_counts_matmuls(rng):
    with mac_tally() as counter:
        matmul(Tensor(rng.normal(size=(5, 7))), Tensor(rng.normal(size=(7, 3))))
        matmul(Tensor(rng.normal(size=(2, 4, 6))), Tensor(rng.normal(size=(6, 3))))
    assert counter[0] == 5 * 7 * 3 + 2 * 4 * 6 * 3


def test_determinism_same_ops_bit_identical(rng):
    data = rng.normal(size=(6, 6))

    def run():
        x = Tensor(data.copy(), requires_grad=True)
        with Graph() as graph:
            y = softmax_rows(matmul(gelu(x), Tensor(data.copy())))
            loss = sum_all(y)
        backward(loss, graph)
        return y.data.copy(), x.grad.copy()

    out1, grad1 = run()
    out2, grad2 = run()
    assert np.array_equal(out1, out2)
    assert np.array_equal(grad1, grad2)
