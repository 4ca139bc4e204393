"""Patch embedding (mini-PointNet) and positional embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

CLASS, PATCH, PROMPT = "class", "patch", "prompt"


class MiniPointNet(Module):
    """Two pointwise stages with a max-pooled global feature in between.

    3 -> h1 -> h2 per point, max over the patch, concat the pooled feature to
    every point, then 2*h2 -> 2*h2 -> d and a final max over the patch.
    """

    def __init__(self, rng, dim: int, h1: int = 128, h2: int = 256):
        self.dim = dim
        self.fc1 = Linear(rng, 3, h1)
        self.norm1 = LayerNorm(h1)
        self.fc2 = Linear(rng, h1, h2)
        self.fc3 = Linear(rng, 2 * h2, 2 * h2)
        self.norm2 = LayerNorm(2 * h2)
        self.fc4 = Linear(rng, 2 * h2, dim)

    def forward(self, neighbors) -> Tensor:
        # neighbors: (..., k, 3) -> (..., d)
        x = T.as_tensor(np.asarray(neighbors, dtype=T.get_dtype()))
        f = self.fc2(T.relu(self.norm1(self.fc1(x))))
        pooled = f.max(axis=-2, keepdims=True)
        f = T.concat([T.broadcast_to(pooled, f.shape), f], axis=-1)
        f = self.fc4(T.relu(self.norm2(self.fc3(f))))
        return f.max(axis=-2)


class PositionalEmbedding(Module):
    """Pointwise MLP from center coordinates to token width."""

    def __init__(self, rng, dim: int, hidden: int = 128):
        self.fc1 = Linear(rng, 3, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, centers) -> Tensor:
        c = T.as_tensor(np.asarray(centers, dtype=T.get_dtype()))
        return self.fc2(T.gelu(self.fc1(c)))


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, L, d)
    centers: np.ndarray  # (B, L, 3); zeros for the class token
    roles: tuple[str, ...]  # length L

    def __post_init__(self):
        if CLASS in self.roles and (self.roles[0] != CLASS or self.roles.count(CLASS) != 1):
            raise ValueError("the class token must appear exactly once, at position 0")
        seen_prompt = False
        for r in self.roles:
            if r == PROMPT:
                seen_prompt = True
            elif r == PATCH and seen_prompt:
                raise ValueError("prompt tokens must follow all patch tokens")

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def positions(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=np.int64)


def embed_patches(neighbors, centers, net: MiniPointNet) -> TokenSequence:
    """Embed (B, g, k, 3) centered patches into a patch-only token sequence."""
    neighbors = np.asarray(neighbors)
    tokens = net(neighbors)
    if tokens.shape[-1] != net.dim:
        raise T.ShapeError(f"token width {tokens.shape[-1]} != {net.dim}")
    return TokenSequence(tokens, np.asarray(centers), (PATCH,) * neighbors.shape[-3])
