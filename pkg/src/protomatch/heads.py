"""Projection heads: small affine encoders with unit-sphere outputs.

Each modality has its own head. Parameters are kept in float32 (matching the
checkpoint file format); all math runs in float64. The backward pass chains
loss gradients on the normalized outputs through the normalization, the
optional tanh hidden layer, and the affine maps.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError


class ProjectionHead:
    """y = normalize(x W0 + b0) or y = normalize(tanh(x W0 + b0) W1 + b1)."""

    def __init__(self, params: dict[str, np.ndarray], hidden: bool):
        self.params = params
        self.hidden = hidden

    @classmethod
    def create(cls, in_dim: int, out_dim: int, hidden_dim: int | None = None, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        if hidden_dim:
            params["w0"] = (rng.normal(size=(in_dim, hidden_dim)) / np.sqrt(in_dim)).astype(np.float32)
            params["b0"] = np.zeros(hidden_dim, dtype=np.float32)
            params["w1"] = (rng.normal(size=(hidden_dim, out_dim)) / np.sqrt(hidden_dim)).astype(np.float32)
            params["b1"] = np.zeros(out_dim, dtype=np.float32)
            return cls(params, hidden=True)
        params["w0"] = (rng.normal(size=(in_dim, out_dim)) / np.sqrt(in_dim)).astype(np.float32)
        params["b0"] = np.zeros(out_dim, dtype=np.float32)
        return cls(params, hidden=False)

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        """Pass-through head (up to renormalization); handy as an evaluation oracle."""
        return cls({"w0": np.eye(dim, dtype=np.float32), "b0": np.zeros(dim, dtype=np.float32)}, hidden=False)

    def forward(self, x: np.ndarray):
        """Returns (unit-norm outputs, cache for backward)."""
        x = np.asarray(x, dtype=np.float64)
        w0 = self.params["w0"].astype(np.float64)
        b0 = self.params["b0"].astype(np.float64)
        cache: dict[str, np.ndarray] = {"x": x}
        if self.hidden:
            h = np.tanh(x @ w0 + b0)
            cache["h"] = h
            z = h @ self.params["w1"].astype(np.float64) + self.params["b1"].astype(np.float64)
        else:
            z = x @ w0 + b0
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if (norms <= 1e-12).any():
            bad = int(np.nonzero(norms[:, 0] <= 1e-12)[0][0])
            raise DegenerateVectorError(f"projection output row {bad} has zero norm")
        y = z / norms
        cache["y"] = y
        cache["norms"] = norms
        return y, cache

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: dict[str, np.ndarray], grad_y: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(normalized output)."""
        y, norms, x = cache["y"], cache["norms"], cache["x"]
        grad_z = (grad_y - y * (y * grad_y).sum(axis=1, keepdims=True)) / norms
        grads: dict[str, np.ndarray] = {}
        if self.hidden:
            h = cache["h"]
            grads["w1"] = h.T @ grad_z
            grads["b1"] = grad_z.sum(axis=0)
            grad_h = (grad_z @ self.params["w1"].astype(np.float64).T) * (1.0 - h * h)
            grads["w0"] = x.T @ grad_h
            grads["b0"] = grad_h.sum(axis=0)
        else:
            grads["w0"] = x.T @ grad_z
            grads["b0"] = grad_z.sum(axis=0)
        return grads
