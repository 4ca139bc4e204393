"""Pre-norm transformer encoder and feature pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, drop_path
from .tensor import Tensor
from .tokenizer import CLASS


@dataclass
class EncoderConfig:
    depth: int = 12
    dim: int = 384
    heads: int = 6
    ffn_dim: int = 1536
    drop_path_rate: float = 0.1
    qkv_bias: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int, qkv_bias: bool = False):
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim, bias=qkv_bias)
        self.proj = Linear(rng, dim, dim)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, c // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
        self.last_weights = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.proj(out)


class Block(Module):
    def __init__(self, rng, cfg: EncoderConfig, drop_path_rate: float = 0.0):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = Attention(rng, cfg.dim, cfg.heads, cfg.qkv_bias)
        self.norm2 = LayerNorm(cfg.dim)
        self.fc1 = Linear(rng, cfg.dim, cfg.ffn_dim)
        self.fc2 = Linear(rng, cfg.ffn_dim, cfg.dim)
        self.drop_path_rate = drop_path_rate

    def attention_branch(self, x: Tensor) -> Tensor:
        return self.attn(self.norm1(x))

    def ffn_branch(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.norm2(x))))

    def forward(self, x: Tensor, rng=None) -> Tensor:
        x = x + drop_path(self.attention_branch(x), self.drop_path_rate, self.training, rng)
        return x + drop_path(self.ffn_branch(x), self.drop_path_rate, self.training, rng)


def attention_forward(x: Tensor, block: Block) -> Tensor:
    """Self-attention branch plus the skip connection."""
    return x + block.attention_branch(x)


def ffn_forward(x: Tensor, block: Block) -> Tensor:
    return x + block.ffn_branch(x)


class Encoder(Module):
    def __init__(self, rng, cfg: EncoderConfig):
        self.cfg = cfg
        # stochastic depth grows linearly with block index
        rates = np.linspace(0.0, cfg.drop_path_rate, cfg.depth)
        self.blocks = [Block(rng, cfg, float(r)) for r in rates]
        self.norm = LayerNorm(cfg.dim)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, rng)
        return self.norm(x)


def pool_features(tokens: Tensor, roles, include_prompts: bool = True) -> Tensor:
    """Concatenate the class token with the max over the other tokens -> (B, 2d)."""
    roles = tuple(roles)
    if not roles or roles[0] != CLASS:
        raise ValueError("pooling needs a class token at position 0")
    others = [i for i, r in enumerate(roles[1:], start=1) if include_prompts or r != "prompt"]
    if not others:
        raise ValueError("pooling needs at least one non-class token")
    rest = tokens[:, others[0]:others[-1] + 1] if others == list(range(others[0], others[-1] + 1)) \
        else tokens[:, np.asarray(others)]
    return T.concat([tokens[:, 0], rest.max(axis=1)], axis=-1)
