import numpy as np
import pytest

from protomatch.errors import NonFiniteGradientError
from protomatch.optim import AdamState, adam_step, clip_gradients, lr_at


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        before = params["w"].copy()
        adam_step(params, {"w": np.zeros(3)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(params["w"], before)

    def test_first_step_closed_form(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(4, 3))
        params = {"w": np.zeros((4, 3))}
        state = AdamState()
        adam_step(params, {"w": g}, state, lr=0.01)
        expected = -0.01 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(params["w"], expected, atol=1e-12)

    def test_constant_gradient_approaches_signed_step(self):
        g = np.array([0.3, -2.0, 5.0])
        params = {"w": np.zeros(3)}
        state = AdamState()
        for _ in range(500):
            adam_step(params, {"w": g}, state, lr=1e-3)
        # steady state: update per step ~ -lr * sign(g)
        before = params["w"].copy()
        adam_step(params, {"w": g}, state, lr=1e-3)
        np.testing.assert_allclose(params["w"] - before, -1e-3 * np.sign(g), rtol=1e-3)

    def test_non_finite_gradient_names_tensor(self):
        params = {"bad_tensor": np.zeros(2)}
        with pytest.raises(NonFiniteGradientError, match="bad_tensor"):
            adam_step(params, {"bad_tensor": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)

    def test_preserves_float32_dtype(self):
        params = {"w": np.zeros(3, dtype=np.float32)}
        adam_step(params, {"w": np.ones(3)}, AdamState(), lr=0.01)
        assert params["w"].dtype == np.float32

    def test_updates_write_through_aliases(self):
        w = np.zeros(3)
        view = {"w": w}
        adam_step(view, {"w": np.ones(3)}, AdamState(), lr=0.01)
        assert w[0] != 0.0


class TestClip:
    def test_large_gradients_scaled_to_max_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        norm = clip_gradients(grads, max_norm=1.0)
        assert norm == pytest.approx(13.0)
        total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        assert total == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        clip_gradients(grads, max_norm=5.0)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])


class TestSchedule:
    def test_step_zero_is_floor(self):
        assert lr_at(0, total_steps=1000, warmup_steps=100, base_lr=1e-5, floor_lr=1e-6) == pytest.approx(1e-6)

    def test_warmup_end_is_base(self):
        assert lr_at(100, total_steps=1000, warmup_steps=100, base_lr=1e-5, floor_lr=1e-6) == pytest.approx(1e-5)

    def test_warmup_is_linear(self):
        lr = lr_at(50, total_steps=1000, warmup_steps=100, base_lr=1e-5, floor_lr=1e-6)
        assert lr == pytest.approx(1e-6 + 0.5 * (1e-5 - 1e-6))

    def test_final_step_in_cosine_tail(self):
        assert lr_at(999, total_steps=1000, warmup_steps=100, base_lr=1e-5, floor_lr=1e-6) <= 1e-7

    def test_monotone_decay_after_warmup(self):
        values = [lr_at(s, 500, 50, 1e-3, 1e-6) for s in range(50, 500)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, 10, 2, 1e-3, 1e-6)
