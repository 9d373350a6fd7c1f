import numpy as np
import pytest

from multiad.tensor import AdamState, NonFiniteGradient, Tensor, adam_step


def adam_reference(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam written out step by step in float64."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


class TestAdam:
    def test_zero_gradient_leaves_parameter(self):
        p = {"w": Tensor(np.array([1.5, -2.0]))}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state)
        np.testing.assert_array_equal(p["w"].data, [1.5, -2.0])
        assert state.t == 1

    def test_first_step_magnitude(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = {"w": Tensor(np.zeros(3))}
        adam_step(p, {"w": g.astype(np.float32)}, AdamState(lr=0.01))
        np.testing.assert_allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-5)

    def test_zero_lr_updates_moments_only(self):
        p = {"w": Tensor(np.ones(2))}
        state = AdamState(lr=0.0)
        adam_step(p, {"w": np.array([1.0, 2.0], dtype=np.float32)}, state)
        np.testing.assert_array_equal(p["w"].data, 1.0)
        np.testing.assert_allclose(state.m["w"], [0.1, 0.2], rtol=1e-6)
        np.testing.assert_allclose(state.v["w"], [0.001, 0.004], rtol=1e-5)

    def test_matches_reference_over_steps(self, rng):
        p0 = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(20)]
        p = {"w": Tensor(p0.copy())}
        state = AdamState(lr=0.05)
        for g in grads:
            adam_step(p, {"w": g}, state)
        np.testing.assert_allclose(p["w"].data, adam_reference(p0, grads, lr=0.05), rtol=1e-10)

    def test_missing_gradient_counts_as_zero(self):
        p = {"a": Tensor(np.ones(1)), "b": Tensor(np.ones(1))}
        state = AdamState()
        adam_step(p, {"a": np.ones(1), "b": None}, state)
        assert p["b"].data[0] == 1.0 and p["a"].data[0] < 1.0

    def test_non_finite_gradient_aborts_untouched(self):
        p = {"w": Tensor(np.ones(2))}
        state = AdamState()
        with pytest.raises(NonFiniteGradient):
            adam_step(p, {"w": np.array([np.nan, 1.0])}, state)
        assert state.t == 0 and not state.m
        np.testing.assert_array_equal(p["w"].data, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": Tensor(np.ones(2))}, {"w": np.ones(3)}, AdamState())

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            adam_step({"w": Tensor(np.ones(2))}, {"w": np.ones(2)}, AdamState(lr=-1.0))
