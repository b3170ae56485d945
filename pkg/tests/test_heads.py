import numpy as np
import pytest

from protomatch.heads import ProjectionHead

from oracles import max_relative_error


def as_float64(head):
    head.params = {k: v.astype(np.float64) for k, v in head.params.items()}
    return head


class TestForward:
    def test_outputs_unit_norm(self):
        rng = np.random.default_rng(0)
        head = ProjectionHead.create(6, 4, seed=1)
        y = head.encode(rng.normal(size=(10, 6)))
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    def test_identity_head_is_row_normalization(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 3))
        y = ProjectionHead.identity(3).encode(x)
        np.testing.assert_allclose(y, x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-12)

    def test_create_deterministic(self):
        a = ProjectionHead.create(5, 5, seed=7)
        b = ProjectionHead.create(5, 5, seed=7)
        np.testing.assert_array_equal(a.params["w0"], b.params["w0"])

    def test_hidden_layer_shapes(self):
        head = ProjectionHead.create(6, 4, hidden_dim=8, seed=0)
        y = head.encode(np.random.default_rng(2).normal(size=(3, 6)))
        assert y.shape == (3, 4)


class TestBackward:
    @pytest.mark.parametrize("hidden_dim", [None, 7])
    def test_parameter_gradients_match_finite_differences(self, hidden_dim):
        rng = np.random.default_rng(3)
        head = as_float64(ProjectionHead.create(5, 4, hidden_dim=hidden_dim, seed=4))
        x = rng.normal(size=(6, 5))
        g = rng.normal(size=(6, 4))

        def scalar_loss():
            return float((head.encode(x) * g).sum())

        y, cache = head.forward(x)
        grads = head.backward(cache, g)

        h = 1e-6
        for name, param in head.params.items():
            fd = np.zeros_like(param)
            for idx in np.ndindex(*param.shape):
                orig = param[idx]
                param[idx] = orig + h
                up = scalar_loss()
                param[idx] = orig - h
                down = scalar_loss()
                param[idx] = orig
                fd[idx] = (up - down) / (2 * h)
            assert max_relative_error(grads[name], fd, floor=1e-5) < 1e-4, name
