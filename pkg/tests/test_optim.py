"""Parameter store and Adam update behavior."""

import numpy as np
import pytest

from kgrelpred.optim import Parameter, ParameterStore, adam_step


def naive_adam(value, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, l2=0.0):
    """Textbook reference: m/v moments with bias correction, step by step."""
    theta = value.astype(np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        g = g + l2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def store_with(value):
    store = ParameterStore()
    store.create("w", np.asarray(value, dtype=np.float64))
    return store


class TestAdam:
    def test_zero_gradient_no_l2_leaves_parameters_unchanged(self):
        store = store_with([1.0, -2.0, 3.0])
        before = store["w"].value.copy()
        adam_step(store, lr=1e-3, l2_weight=0.0)
        np.testing.assert_array_equal(store["w"].value, before)

    def test_first_step_sign_magnitude(self):
        # one scalar step at g=0.5: bias-corrected update is ~ -lr
        store = store_with([0.0])
        store["w"].grad[:] = 0.5
        adam_step(store, lr=1e-3)
        delta = float(store["w"].value[0])
        assert delta == pytest.approx(-1e-3, rel=1e-6)

    def test_two_steps_reduce_quadratic(self):
        # loss = 0.5 * theta^2, grad = theta
        store = store_with([1.0])
        losses = [0.5 * float(store["w"].value[0]) ** 2]
        for _ in range(2):
            store["w"].grad[:] = store["w"].value
            adam_step(store, lr=1e-2)
            losses.append(0.5 * float(store["w"].value[0]) ** 2)
        assert losses[0] > losses[1] > losses[2]

    def test_matches_naive_reference_over_steps(self):
        rng = np.random.default_rng(5)
        value = rng.standard_normal((3, 2))
        grads = [rng.standard_normal((3, 2)) for _ in range(7)]
        store = store_with(value)
        for g in grads:
            store["w"].grad[:] = g
            adam_step(store, lr=3e-3, l2_weight=0.0)
        np.testing.assert_allclose(store["w"].value, naive_adam(value, grads, lr=3e-3),
                                   rtol=1e-12, atol=1e-12)

    def test_l2_enters_before_moments(self):
        rng = np.random.default_rng(6)
        value = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(4)]
        store = store_with(value)
        for g in grads:
            store["w"].grad[:] = g
            adam_step(store, lr=1e-3, l2_weight=0.1)
        # the naive reference applies l2 to the *current* theta each step
        expected = naive_adam(value, grads, lr=1e-3, l2=0.1)
        np.testing.assert_allclose(store["w"].value, expected, rtol=1e-10, atol=1e-12)

    def test_gradients_zeroed_after_step(self):
        store = store_with([1.0])
        store["w"].grad[:] = 2.0
        adam_step(store)
        np.testing.assert_array_equal(store["w"].grad, [0.0])

    def test_step_index_validates(self):
        with pytest.raises(ValueError):
            adam_step(store_with([1.0]), t=0)


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = store_with([1.0])
        with pytest.raises(ValueError, match="duplicate"):
            store.create("w", np.zeros(1))

    def test_glorot_bound_and_zero_bias(self):
        store = ParameterStore()
        rng = np.random.default_rng(0)
        p = store.glorot("m", (30, 20), rng)
        bound = np.sqrt(6.0 / 50)
        assert np.abs(p.value).max() <= bound
        b = store.glorot("b", (20,), rng)
        np.testing.assert_array_equal(b.value, np.zeros(20))

    def test_value_grad_moments_share_shape(self):
        store = store_with(np.ones((2, 3)))
        p = store["w"]
        assert p.value.shape == p.grad.shape == p.m1.shape == p.m2.shape

    def test_state_dict_roundtrip(self):
        store = store_with(np.arange(6.0).reshape(2, 3))
        other = ParameterStore()
        other.load_state_dict(store.state_dict())
        np.testing.assert_array_equal(other["w"].value, store["w"].value)
        with pytest.raises(ValueError, match="shape"):
            other.load_state_dict({"w": np.zeros((3, 3))})

    def test_leaves_accumulate(self):
        store = store_with(np.ones(3))
        leaves = store.leaves()
        leaves["w"].add_grad(np.full(3, 2.0))
        store.accumulate(leaves)
        np.testing.assert_array_equal(store["w"].grad, np.full(3, 2.0))
