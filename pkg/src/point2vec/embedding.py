"""Patch embeddings (mini-PointNet) and center-point position embeddings."""

from __future__ import annotations

import numpy as np

from .numerics import Module, Tensor, broadcast_to, concat
from .numerics import functional as F
from .numerics.errors import NumericError
from .numerics.nn import LayerNorm, Linear


class MiniPointNet(Module):
    """Per-patch encoder, invariant to the order of points inside a patch.

    shared MLP -> max-pool -> concat pooled to every point -> shared MLP -> max-pool.
    Hidden layers use layer norm + GELU.
    """

    def __init__(self, rng: np.random.Generator, first_dims=(128, 256), second_dims=(512, 384)):
        h1, out1 = first_dims
        h2, out2 = second_dims
        self.fc1 = Linear(3, h1, rng)
        self.norm1 = LayerNorm(h1)
        self.fc2 = Linear(h1, out1, rng)
        self.fc3 = Linear(2 * out1, h2, rng)
        self.norm2 = LayerNorm(h2)
        self.fc4 = Linear(h2, out2, rng)
        self.out_dim = out2

    def __call__(self, patches) -> Tensor:
        """(…, n, k, 3) patches -> (…, n, E) embeddings."""
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches), dtype=self.fc1.weight.dtype)
        if not np.all(np.isfinite(x.data)):
            raise NumericError("non-finite patch coordinates")
        f = self.fc2(F.gelu(self.norm1(self.fc1(x))))
        pooled = f.max(axis=-2, keepdims=True)
        f = concat([broadcast_to(pooled, f.shape), f], axis=-1)
        f = self.fc4(F.gelu(self.norm2(self.fc3(f))))
        return f.max(axis=-2)


class PositionalEncoder(Module):
    """Two-layer MLP from a center point to a position embedding."""

    def __init__(self, rng: np.random.Generator, dim: int = 384, hidden: int = 128):
        self.fc1 = Linear(3, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, centers) -> Tensor:
        x = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers), dtype=self.fc1.weight.dtype)
        return self.fc2(F.gelu(self.fc1(x)))


def embed_patches(patches, params: MiniPointNet) -> Tensor:
    return params(patches)


def encode_positions(centers, params: PositionalEncoder) -> Tensor:
    return params(centers)
