"""Pre-norm Transformer encoder with positional re-injection before every block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Tensor, matmul
from .numerics import functional as F
from .numerics.errors import ParameterError, ShapeError
from .numerics.nn import LayerNorm, Linear


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    dim: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    attn_drop: float = 0.0
    proj_drop: float = 0.0
    qkv_bias: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ParameterError(f"encoder depth must be >= 1, got {self.depth}")
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.drop_path < 1.0:
            raise ParameterError(f"drop_path must lie in [0, 1), got {self.drop_path}")

    @property
    def drop_path_rates(self) -> list[float]:
        return [float(r) for r in np.linspace(0.0, self.drop_path, self.depth)]


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, qkv_bias: bool = True,
                 attn_drop: float = 0.0, proj_drop: float = 0.0):
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias)
        self.proj = Linear(dim, dim, rng)
        self.attn_drop = attn_drop
        self.proj_drop = proj_drop
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        *lead, t, e = x.shape
        qkv = self.qkv(x).reshape(*lead, t, 3, self.heads, self.head_dim)
        nl = len(lead)
        # -> (3, *lead, heads, T, head_dim)
        qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, k.swapaxes(-1, -2)) * self.scale
        weights = F.softmax(scores, axis=-1)
        self.last_weights = weights.data
        weights = F.dropout(weights, self.attn_drop, training, rng)
        out = matmul(weights, v)  # (*lead, heads, T, head_dim)
        out = out.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, t, e)
        return F.dropout(self.proj(out), self.proj_drop, training, rng)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, drop: float = 0.0):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.drop = drop

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = F.dropout(F.gelu(self.fc1(x)), self.drop, training, rng)
        return F.dropout(self.fc2(h), self.drop, training, rng)


class Block(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, drop_path: float = 0.0):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads, rng, cfg.qkv_bias, cfg.attn_drop, cfg.proj_drop)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = Mlp(cfg.dim, int(cfg.dim * cfg.mlp_ratio), rng, cfg.proj_drop)
        self.drop_path = drop_path

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        x = x + F.drop_path(self.attn(self.norm1(x), training, rng), self.drop_path, training, rng)
        return x + F.drop_path(self.mlp(self.norm2(x), training, rng), self.drop_path, training, rng)


class TransformerEncoder(Module):
    """Stack of blocks; ``norm`` is the final layer norm used by task heads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [Block(cfg, rng, r) for r in cfg.drop_path_rates]
        self.norm = LayerNorm(cfg.dim)

    def __call__(self, tokens: Tensor, pos: Tensor, training: bool = False, rng=None) -> list[Tensor]:
        """Raw output of every block, in order. ``pos`` is added before each block."""
        if tokens.shape != pos.shape:
            raise ShapeError(f"tokens {tokens.shape} and positions {pos.shape} differ")
        if tokens.shape[-1] != self.cfg.dim:
            raise ShapeError(f"token width {tokens.shape[-1]} != encoder dim {self.cfg.dim}")
        outputs = []
        x = tokens
        for block in self.blocks:
            x = block(x + pos, training, rng)
            outputs.append(x)
        return outputs


def encoder_forward(tokens: Tensor, pos: Tensor, encoder: TransformerEncoder, training: bool = False,
                    rng=None) -> list[Tensor]:
    return encoder(tokens, pos, training, rng)
