"""LoRA adapters, prompt MLPs, the mask predictor and Top-K token selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter
from .tensor import Tensor


class LoraAdapter(Module):
    """Trainable low-rank update ``scaling * down @ up`` for an (in, out) weight.

    ``up`` starts at zero so the update is exactly zero until trained.
    """

    def __init__(self, rng, in_features: int, out_features: int, rank: int,
                 scaling: float = 1.0, init_std: float = 0.02):
        if not 1 <= rank < min(in_features, out_features):
            raise ValueError(f"rank {rank} must satisfy 1 <= r < min({in_features}, {out_features})")
        self.rank = rank
        self.scaling = scaling
        self.down = Parameter(rng.normal(0.0, init_std, size=(in_features, rank)))
        self.up = Parameter(np.zeros((rank, out_features)))

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.down.data @ self.up.data)

    def forward(self, x: Tensor) -> Tensor:
        return ((x @ self.down) @ self.up) * self.scaling


class PromptMlp(Module):
    """Pointwise ``in -> hidden -> out`` MLP with GELU; output layer zero-initialised."""

    def __init__(self, rng, in_features: int, hidden: int, out_features: int):
        self.fc1 = Linear(rng, in_features, hidden)
        self.fc2 = Linear(rng, hidden, out_features, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class AdaptedLinear(Linear):
    """A frozen linear with optional LoRA adapters and an optional shared prompt MLP.

    ``adapters`` split the output columns into equal slices, one adapter per
    slice.  The prompt MLP is held by reference (shared across blocks), so it
    is not registered as a child here.
    """

    def __init__(self, base: Linear, adapters=(), prompt: PromptMlp | None = None):
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.weight = base.weight
        self.bias = base.bias
        self.adapters = list(adapters)
        self._prompt = prompt
        if self.adapters:
            width = sum(a.up.shape[1] for a in self.adapters)
            if width != self.out_features:
                raise ValueError(f"adapter slices cover {width} of {self.out_features} columns")

    @property
    def prompt(self) -> PromptMlp | None:
        return self._prompt

    def base_forward(self, x: Tensor) -> Tensor:
        return Linear.forward(self, x)

    def lora_delta(self, x: Tensor) -> Tensor:
        parts = [a(x) for a in self.adapters]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)

    def delta_weight(self) -> np.ndarray:
        return np.concatenate([a.delta_weight() for a in self.adapters], axis=1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.base_forward(x)
        if self.adapters:
            y = y + self.lora_delta(x)
        if self._prompt is not None:
            y = y + self._prompt(x)
        return y


def lora_forward(x: Tensor, layer: AdaptedLinear) -> Tensor:
    """``x W_p (+ b) + scaling (x W_down) W_up``; the prompt path is left out."""
    y = layer.base_forward(x)
    return y + layer.lora_delta(x) if layer.adapters else y


def lora_merge(layer: AdaptedLinear) -> np.ndarray:
    """The consolidated inference weight ``W_p + scaling W_down W_up``."""
    if not layer.adapters:
        return layer.weight.data.copy()
    return (layer.weight.data + layer.delta_weight()).astype(layer.weight.data.dtype)


def pointlora_layer_forward(x: Tensor, layer: AdaptedLinear) -> Tensor:
    return layer(x)


class MaskPredictor(Module):
    """Two linear layers with GELU between, then a sigmoid: one score per token."""

    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, 1)

    def forward(self, tokens: Tensor) -> Tensor:
        logits = self.fc2(T.gelu(self.fc1(tokens)))
        return T.sigmoid(logits.reshape(logits.shape[:-1]))


def predict_token_scores(tokens: Tensor, predictor: MaskPredictor) -> Tensor:
    return predictor(tokens)


@dataclass
class SelectionState:
    scores: list  # per scale, (B, g_m) score tensors
    indices: list  # per scale, (B, N_m') int arrays
    tokens: Tensor  # (B, N_s, d)
    centers: np.ndarray  # (B, N_s, 3)

    @property
    def num_selected(self) -> int:
        return self.tokens.shape[1]


def select_topk_tokens(tokens, scores, centers, selected) -> SelectionState:
    """Keep the top-``N_m'`` tokens of every scale and concatenate in scale order.

    ``tokens[m]`` is (B, g_m, d), ``scores[m]`` (B, g_m), ``centers[m]`` (B, g_m, 3).
    Selection is hard; no gradient flows through the scores.
    """
    picked, picked_centers, all_idx = [], [], []
    for tok, sc, cen, n in zip(tokens, scores, centers, selected):
        b, g = sc.shape
        if n > g:
            raise ValueError(f"cannot select {n} tokens out of {g}")
        idx = np.stack([T.topk_indices(sc.data[i], n) for i in range(b)]) if n else np.zeros((b, 0), np.int64)
        rows = np.arange(b)[:, None]
        picked.append(tok[rows, idx])
        picked_centers.append(np.asarray(cen)[rows, idx])
        all_idx.append(idx)
    return SelectionState(
        scores=list(scores),
        indices=all_idx,
        tokens=T.concat(picked, axis=1),
        centers=np.concatenate(picked_centers, axis=1),
    )
