"""Tests for the tensor engine and its contract operations."""

import numpy as np
import pytest

from delanlab.numerics import (
    EmptySupportError,
    Tensor,
    concat,
    gather_rows,
    grad_check,
    layer_norm,
    log_softmax,
    masked_softmax,
    matmul,
    mean_pool,
    no_grad,
    softmax,
    stack,
    tensor,
)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop oracle with left-to-right accumulation over k."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc = acc + a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        out = masked_softmax([0.0, 0.0], [True, True]).data
        np.testing.assert_allclose(out, [0.5, 0.5], rtol=0, atol=0)

    def test_single_support(self):
        out = masked_softmax([5.0, -3.0], [True, False]).data
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_two_logit_value(self):
        # Independent high-precision evaluation of exp(v)/sum(exp(v)):
        # 1/(1+e) = 0.2689414213699951, e/(1+e) = 0.7310585786300049.
        out = masked_softmax([0.0, 1.0], [True, True]).data
        np.testing.assert_allclose(out, [0.2689414213699951, 0.7310585786300049], atol=1e-15)

    def test_empty_support_rejected(self):
        with pytest.raises(EmptySupportError, match="empty softmax support"):
            masked_softmax([1.0, 2.0], [False, False])

    def test_probability_vector_property(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 9))
            v = rng.normal(scale=5.0, size=n)
            mask = rng.random(n) < 0.6
            if not mask.any():
                mask[int(rng.integers(0, n))] = True
            out = masked_softmax(v, mask).data
            assert np.all(out[~mask] == 0.0)
            assert np.all(out[mask] >= 0.0)
            np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(11)
        v = rng.normal(size=6)
        mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
        a = masked_softmax(v, mask).data
        b = masked_softmax(v + 123.456, mask).data
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=5)
        mask = np.array([1, 0, 1, 1, 1], dtype=bool)

        def f(x):
            p = masked_softmax(x, mask)
            return (p * p).sum()

        report = grad_check(f, v, step=1e-5, tol=1e-4)
        assert report.passed, report


class TestMatmul:
    def test_identity(self):
        b = np.arange(6.0).reshape(2, 3)
        out = matmul(np.eye(2), b).data
        np.testing.assert_array_equal(out, b)

    def test_one_by_one(self):
        out = matmul([[1.0, 2.0]], [[3.0], [4.0]]).data
        np.testing.assert_array_equal(out, [[11.0]])

    def test_matches_naive_oracle_exactly(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(matmul(a, b).data, naive_matmul(a, b))

    def test_associativity_against_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            a = rng.normal(size=(3, 5))
            b = rng.normal(size=(5, 4))
            c = rng.normal(size=(4, 2))
            left = matmul(matmul(a, b), c).data
            right = matmul(a, matmul(b, c).data).data
            oracle = naive_matmul(naive_matmul(a, b), c)
            np.testing.assert_allclose(left, oracle, atol=1e-12)
            np.testing.assert_allclose(right, oracle, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient(self):
        rng = np.random.default_rng(29)
        b = rng.normal(size=(4, 3))

        def f(x):
            return (matmul(x, b) ** 2).sum()

        report = grad_check(f, rng.normal(size=(2, 4)))
        assert report.passed, report


class TestMeanPool:
    def test_single_row(self):
        r = np.array([[2.0, -1.0, 3.0]])
        np.testing.assert_array_equal(mean_pool(r, [True]).data, r[0])

    def test_symmetric_rows(self):
        m = np.array([[1.0, 1.0], [3.0, 3.0]])
        np.testing.assert_array_equal(mean_pool(m, [True, True]).data, [2.0, 2.0])

    def test_masked_rows(self):
        m = np.array([[1.0, 0.0], [9.0, 9.0], [3.0, 2.0]])
        np.testing.assert_array_equal(mean_pool(m, [1, 0, 1]).data, [2.0, 1.0])

    def test_zero_valid_rows(self):
        with pytest.raises(EmptySupportError):
            mean_pool(np.ones((2, 2)), [False, False])


class TestGradCheck:
    def test_quadratic_is_exact(self):
        report = grad_check(lambda x: (x * x).sum(), np.array([1.0, 2.0]))
        assert report.passed
        assert report.max_relative_error < 1e-9

    def test_reports_bad_gradient(self):
        def f(x):
            # Deliberately wrong backward: value of sum(x^2) but gradient of sum(x).
            return x.sum() + ((x * x).sum().item() - x.sum().item())

        report = grad_check(f, np.array([1.0, 2.0]))
        assert not report.passed
        assert report.worst_coordinate == (1,)

    def test_nonfinite_probe_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            grad_check(lambda x: (x.log()).sum(), np.array([1.0, -1.0]))


class TestEngine:
    def test_checked_construction_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            tensor([1.0, np.nan], checked=True)

    def test_broadcast_add_gradient(self):
        rng = np.random.default_rng(5)
        b = rng.normal(size=(3,))

        def f(x):
            return ((x + Tensor(b)) * 2.0).sum()

        report = grad_check(f, rng.normal(size=(2, 3)))
        assert report.passed

    def test_batched_matmul_gradient(self):
        rng = np.random.default_rng(13)
        w = Tensor(rng.normal(size=(4, 3)))

        def f(x):
            return ((x @ w).tanh()).sum()

        report = grad_check(f, rng.normal(size=(2, 5, 4)))
        assert report.passed

    def test_getitem_and_concat_gradients(self):
        rng = np.random.default_rng(19)

        def f(x):
            a = x[0:2]
            b = x[1:3]
            return (concat([a, b], axis=0) ** 2).sum()

        report = grad_check(f, rng.normal(size=(3, 2)))
        assert report.passed

    def test_gather_rows_duplicates(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = gather_rows(table, np.array([0, 0, 2]))
        out.sum().backward()
        np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_stack_and_layer_norm_gradient(self):
        rng = np.random.default_rng(31)
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))

        def f(x):
            rows = [x[i] for i in range(x.shape[0])]
            return (layer_norm(stack(rows), gain, bias) ** 3).sum()

        report = grad_check(f, rng.normal(size=(3, 4)))
        assert report.passed

    def test_log_softmax_masked_gradient(self):
        rng = np.random.default_rng(37)
        mask = np.array([True, True, False, True])

        def f(x):
            return -log_softmax(x, mask=mask)[np.array([0])].sum()

        report = grad_check(f, rng.normal(size=4))
        assert report.passed

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_softmax_matches_masked_full_support(self):
        rng = np.random.default_rng(41)
        v = rng.normal(size=7)
        np.testing.assert_allclose(
            softmax(v).data, masked_softmax(v, np.ones(7, bool)).data, atol=1e-15)

    def test_determinism(self):
        rng = np.random.default_rng(43)
        a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 4))
        first = (Tensor(a) @ Tensor(b)).data
        second = (Tensor(a) @ Tensor(b)).data
        np.testing.assert_array_equal(first, second)
