"""Dense ops, batched ops, and reverse-mode gradients against oracles."""

import numpy as np
import pytest

from kgrelpred import autodiff as ad


def matmul_oracle(a, b):
    """Naive triple-loop reference."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def central_diff(f, x, eps=1e-6):
    """Gradient of scalar f at array x by central differences."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def check_grads(build, arrays, eps=1e-6, tol=1e-6):
    """build(leaves) -> scalar Tensor; compares backward grads to central diffs."""
    leaves = [ad.leaf(a) for a in arrays]
    loss = build(leaves)
    ad.backward(loss)
    for a, t in zip(arrays, leaves):
        fd = central_diff(lambda: float(build([ad.constant(x) for x in arrays]).data), a, eps)
        an = t.grad if t.grad is not None else np.zeros_like(a)
        np.testing.assert_allclose(an, fd, rtol=tol, atol=tol)


class TestDenseOps:
    def test_matmul_matches_naive_loops(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(ad.matmul(a, b).data, matmul_oracle(a, b), atol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError, match="matmul"):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_outer_basis_vectors(self):
        got = ad.outer(np.array([1.0, 0.0]), np.array([0.0, 1.0])).data
        np.testing.assert_array_equal(got, [[0.0, 1.0], [0.0, 0.0]])

    def test_flatten_of_outer_has_square_length(self):
        rng = np.random.default_rng(1)
        u, v = rng.standard_normal(5), rng.standard_normal(5)
        assert ad.flatten(ad.outer(u, v)).data.shape == (25,)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, np.full(3, 1 / 3), atol=1e-15)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.uniform(-50, 50, size=rng.integers(1, 9))
            y = ad.softmax(x).data
            assert abs(y.sum() - 1.0) <= 1e-9
            assert (y >= 0).all()

    def test_softmax_extreme_values_no_overflow(self):
        y = ad.softmax(np.array([1000.0, 0.0])).data
        # e^-1000 underflows to exactly 0 in float64; max-subtraction keeps the rest exact
        np.testing.assert_array_equal(y, [1.0, 0.0])

    def test_cross_entropy_uniform_logits(self):
        for target in range(5):
            got = float(ad.cross_entropy(np.zeros(5), target).data)
            assert got == pytest.approx(np.log(5), abs=1e-12)

    def test_cross_entropy_nonnegative_and_onehot_limit(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            x = rng.uniform(-10, 10, size=6)
            assert float(ad.cross_entropy(x, 2).data) >= 0.0
        sharp = np.zeros(4)
        sharp[1] = 50.0
        assert float(ad.cross_entropy(sharp, 1).data) < 1e-12

    def test_cross_entropy_bad_target(self):
        with pytest.raises(ValueError):
            ad.cross_entropy(np.zeros(3), 3)


class TestBackward:
    def test_linear_case(self):
        # loss = sum(W @ x) with x fixed: dW = broadcast of x over rows
        rng = np.random.default_rng(4)
        w = ad.leaf(rng.standard_normal((3, 4)))
        x = rng.standard_normal((4, 1))
        loss = ad.mean_all(ad.matmul(w, x))
        loss = ad.scale(loss, 3.0)  # mean over 3 rows * 3 = sum
        ad.backward(loss)
        np.testing.assert_allclose(w.grad, np.broadcast_to(x.T, (3, 4)), atol=1e-12)

    def test_grad_of_constant_is_zero(self):
        w = ad.leaf(np.ones((2, 2)))
        loss = ad.mean_all(ad.constant(np.ones((2, 2))))
        ad.backward(loss)
        assert w.grad is None  # never touched: zero by definition

    def test_backward_requires_traced_scalar(self):
        with pytest.raises(ValueError, match="traced"):
            ad.backward(ad.constant(1.0))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.relu(ad.leaf(np.ones(3))))

    def test_reused_node_accumulates(self):
        x = ad.leaf(np.array([2.0]))
        y = ad.add(x, x)  # dy/dx = 2
        ad.backward(ad.mean_all(y))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_no_grad_disables_tracing(self):
        with ad.no_grad():
            y = ad.relu(ad.leaf(np.ones(3)))
            assert not y.traced


class TestOpGradients:
    """Central-difference checks, one per op family."""

    rng = np.random.default_rng(7)

    def test_matmul_add_relu(self):
        a = self.rng.standard_normal((4, 3))
        b = self.rng.standard_normal((3, 2))
        c = self.rng.standard_normal((4, 2))
        check_grads(lambda L: ad.mean_all(ad.relu(ad.add(ad.matmul(L[0], L[1]), L[2]))), [a, b, c])

    def test_outer_flatten_scale(self):
        u, v = self.rng.standard_normal(4), self.rng.standard_normal(4)
        check_grads(lambda L: ad.mean_all(ad.scale(ad.flatten(ad.outer(L[0], L[1])), 2.5)), [u, v])

    def test_softmax_and_cross_entropy(self):
        x = self.rng.standard_normal(6)
        check_grads(lambda L: ad.mean_all(ad.softmax(L[0])), [x.copy()], tol=1e-5)
        check_grads(lambda L: ad.cross_entropy(L[0], 2), [x.copy()], tol=1e-5)

    def test_concat_transpose_sum_rows(self):
        a = self.rng.standard_normal((3, 2))
        b = self.rng.standard_normal((3, 2))
        check_grads(
            lambda L: ad.mean_all(ad.sum_rows(ad.concat([L[0], ad.transpose(L[1])], axis=0))),
            [a, b.T.copy()],
        )

    def test_gather_segment_scale_rows(self):
        x = self.rng.standard_normal((5, 3))
        w = self.rng.standard_normal(4)
        idx = np.array([0, 2, 2, 4])
        ptr = np.array([0, 1, 1, 3, 4])  # includes an empty segment

        def build(L):
            g = ad.gather_rows(L[0], idx)
            g = ad.scale_rows(g, L[1])
            return ad.mean_all(ad.segment_sum(g, np.arange(4), ptr))

        check_grads(build, [x, w])

    def test_row_dot_softmax_rows_slice(self):
        a = self.rng.standard_normal((4, 3))
        b = self.rng.standard_normal((4, 3))

        def build(L):
            d = ad.row_dot(L[0], L[1])
            m = ad.concat([ad.reshape(d, (4, 1)), ad.reshape(d, (4, 1))], axis=1)
            sm = ad.softmax_rows(m)
            return ad.mean_all(ad.slice_cols(sm, 0, 1))

        check_grads(build, [a, b], tol=1e-5)

    def test_segment_softmax(self):
        logits = self.rng.standard_normal(7)
        ptr = np.array([0, 3, 3, 7])  # empty middle segment

        def build(L):
            alpha = ad.segment_softmax(ad.flatten(L[0]), ptr)
            return ad.mean_all(ad.scale_rows(ad.constant(np.ones((7, 2))), alpha))

        check_grads(build, [logits], tol=1e-5)

    def test_cross_entropy_rows(self):
        logits = self.rng.standard_normal((3, 5))
        targets = np.array([1, 0, 4])
        check_grads(lambda L: ad.mean_all(ad.cross_entropy_rows(L[0], targets)), [logits], tol=1e-5)

    @pytest.mark.parametrize("activation", ["relu", "sigmoid"])
    def test_pair_bilinear_matches_unfused(self, activation):
        n, d = 5, 3
        mh = self.rng.standard_normal((n, d))
        mt = self.rng.standard_normal((n, d))
        s = self.rng.standard_normal((n, d))
        w1 = self.rng.standard_normal((d * d, d))
        w2 = self.rng.standard_normal((d, d))
        b = self.rng.standard_normal(d)

        fused = ad.pair_bilinear(*(ad.constant(x) for x in (mh, mt, s, w1, w2, b)),
                                 activation=activation)
        cross = np.einsum("ni,nj->nij", mh, mt).reshape(n, d * d)
        z = cross @ w1 + s @ w2 + b
        ref = np.where(z > 0, z, 0.0) if activation == "relu" else 1 / (1 + np.exp(-z))
        np.testing.assert_allclose(fused.data, ref, atol=1e-12)

        check_grads(
            lambda L: ad.mean_all(ad.pair_bilinear(*L, activation=activation)),
            [mh, mt, s, w1, w2, b],
            tol=2e-5,
        )

    def test_pair_bilinear_shared_input(self):
        # mh, mt, and s can alias the same tensor (an isolated edge's update)
        n, d = 3, 2
        x = self.rng.standard_normal((n, d))
        w1 = self.rng.standard_normal((d * d, d))
        w2 = self.rng.standard_normal((d, d))
        b = np.zeros(d)

        def build(L):
            return ad.mean_all(ad.pair_bilinear(L[0], L[0], L[0], L[1], L[2], L[3]))

        check_grads(build, [x, w1, w2, b], tol=2e-5)


class TestFiniteness:
    def test_pipeline_outputs_finite(self):
        rng = np.random.default_rng(11)
        x = ad.leaf(rng.standard_normal((6, 4)))
        w = ad.leaf(rng.standard_normal((4, 4)))
        y = ad.relu(ad.matmul(x, w))
        y = ad.softmax_rows(y)
        z = ad.segment_sum(y, np.arange(6), np.array([0, 2, 4, 6]))
        for t in (x, w, y, z):
            assert np.isfinite(t.data).all()
