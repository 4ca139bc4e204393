"""Losses, AdamW, the learning-rate schedule and the train / eval loops."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import LossConfig, OptimConfig
from .model import PointClassifier, trainable_parameters
from .tensor import Tensor


def task_loss(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over the batch, optionally label-smoothed."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be {b} integers in [0, {c})")
    target = np.full((b, c), label_smoothing / c)
    target[np.arange(b), labels] += 1.0 - label_smoothing
    logp = T.log_softmax(logits, axis=-1)
    return -(logp * T.as_tensor(target)).sum() * (1.0 / b)


def mask_loss(scores: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Mean binary entropy of the token scores; pushes scores towards 0 or 1."""
    s = scores
    ent = s * T.log(s + epsilon) + (1.0 - s) * T.log((1.0 - s) + epsilon)
    return -ent.mean()


def total_loss(task: Tensor, mask: Tensor | None, cfg: LossConfig) -> Tensor:
    if mask is None or cfg.mask_weight == 0.0:
        return task
    return task + mask * cfg.mask_weight


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak: float, floor: float = 1e-6) -> float:
    """Linear warmup from 0, then cosine decay to ``floor`` at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, param) -> bool:
    # no decay on biases, norm gains, the class token or the predictor's final bias
    return param.data.ndim > 1 and not name.endswith(".bias")


@dataclass
class AdamW:
    params: Sequence  # (name, Parameter) pairs
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, (name, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            data = p.data
            if self.weight_decay and decays(name, p):
                data = data * (1.0 - lr * self.weight_decay)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (data - lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adamw_step(params, grads, state: AdamW, lr: float) -> None:
    """Functional entry point: assign ``grads`` then take one AdamW step."""
    for (_, p), g in zip(params, grads):
        p.grad = g
    state.step(lr)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for _, p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (norm + 1e-6))
    return norm


def scale_and_translate(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random anisotropic scale in [2/3, 3/2] and shift in [-0.2, 0.2] per axis."""
    scale = rng.uniform(2.0 / 3.0, 1.5, size=3)
    shift = rng.uniform(-0.2, 0.2, size=3)
    return points * scale + shift


def _points_and_labels(dataset):
    clouds = [c.points if hasattr(c, "points") else np.asarray(c) for c in dataset]
    labels = np.array([c.label for c in dataset], dtype=np.int64)
    return clouds, labels


def forward_loss(model: PointClassifier, clouds, labels, loss_cfg: LossConfig, rng=None):
    out = model(clouds, rng)
    task = task_loss(out.logits, labels, loss_cfg.label_smoothing)
    scores = out.all_scores()
    mask = mask_loss(scores, loss_cfg.epsilon) if scores is not None else None
    return total_loss(task, mask, loss_cfg), out


@dataclass
class Trainer:
    """Owns the optimizer and the step counter for one fine-tuning run."""

    model: PointClassifier
    loss_cfg: LossConfig
    optim_cfg: OptimConfig
    steps_per_epoch: int
    augment: bool = True
    optimizer: AdamW = None
    step: int = 0

    def __post_init__(self):
        self.params = trainable_parameters(self.model)
        if self.optimizer is None:
            self.optimizer = AdamW(self.params, self.optim_cfg.weight_decay)

    def lr(self) -> float:
        o = self.optim_cfg
        return lr_schedule(self.step, o.epochs * self.steps_per_epoch,
                           o.warmup_epochs * self.steps_per_epoch, o.lr, o.min_lr)

    def train_epoch(self, dataset, rng: np.random.Generator) -> dict:
        clouds, labels = _points_and_labels(dataset)
        self.model.train()
        order = rng.permutation(len(clouds))
        bs = self.optim_cfg.batch_size
        loss_sum = correct = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            batch = [clouds[i] for i in idx]
            if self.augment:
                batch = [scale_and_translate(p, rng) for p in batch]
            self.optimizer.zero_grad()
            loss, out = forward_loss(self.model, batch, labels[idx], self.loss_cfg, rng)
            loss.backward()
            if self.optim_cfg.grad_clip:
                clip_grad_norm(self.params, self.optim_cfg.grad_clip)
            lr = self.lr()
            self.optimizer.step(lr)
            self.step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((out.logits.data.argmax(-1) == labels[idx]).sum())
        self.model.eval()
        return {"lr": lr, "train_loss": loss_sum / len(order), "train_acc": correct / len(order)}


def train_epoch(trainer: Trainer, dataset, rng) -> dict:
    return trainer.train_epoch(dataset, rng)


def predict(model: PointClassifier, dataset, batch_size: int = 32) -> np.ndarray:
    clouds, _ = _points_and_labels(dataset)
    model.eval()
    preds = []
    for start in range(0, len(clouds), batch_size):
        preds.append(model(clouds[start:start + batch_size]).logits.data.argmax(-1))
    return np.concatenate(preds)


def evaluate(model: PointClassifier, dataset, batch_size: int = 32) -> float:
    """Overall accuracy: correct predictions over all instances."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _, labels = _points_and_labels(dataset)
    return float((predict(model, dataset, batch_size) == labels).mean())


def fit(model: PointClassifier, train_set, test_set, loss_cfg: LossConfig, optim_cfg: OptimConfig,
        seed: int = 0, augment: bool = True, log: Callable[[str], None] | None = None) -> list[dict]:
    """Run ``optim_cfg.epochs`` epochs; returns one metrics record per epoch."""
    rng = np.random.default_rng(seed)
    steps = math.ceil(len(train_set) / optim_cfg.batch_size)
    trainer = Trainer(model, loss_cfg, optim_cfg, steps, augment)
    history = []
    for epoch in range(optim_cfg.epochs):
        rec = {"epoch": epoch + 1, **trainer.train_epoch(train_set, rng)}
        rec["eval_acc"] = evaluate(model, test_set, optim_cfg.batch_size) if len(test_set) else None
        history.append(rec)
        if log is not None:
            log(json.dumps(rec))
    return history
