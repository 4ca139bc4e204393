import numpy as np
import pytest

from pointlora import tensor as T
from pointlora.config import HeadConfig, ModelConfig, MultiScaleConfig, PeftConfig, TokenizerConfig
from pointlora.transformer import EncoderConfig


def tiny_config(method="pointlora", **peft) -> ModelConfig:
    """A model small enough for finite differences: L=2, d=8, H=2, 3 patches."""
    enc = EncoderConfig(depth=2, dim=8, heads=2, ffn_dim=16, drop_path_rate=0.0)
    tok = TokenizerConfig(num_groups=3, group_size=4, h1=4, h2=6, pos_hidden=5)
    ms = MultiScaleConfig(scales=[[4, 3], [2, 3]], selected=[2, 1])
    kw = dict(method=method, rank=2, prompt_dim=3, multiscale=ms)
    kw.update(peft)
    return ModelConfig(num_classes=3, encoder=enc, tokenizer=tok, head=HeadConfig(hidden=6, dropout=0.0),
                       peft=PeftConfig(**kw))


def small_config(method="pointlora", **peft) -> ModelConfig:
    """Small but non-degenerate: used for merge, checkpoint and CLI checks."""
    enc = EncoderConfig(depth=2, dim=16, heads=2, ffn_dim=32, drop_path_rate=0.1)
    tok = TokenizerConfig(num_groups=16, group_size=8, h1=8, h2=16, pos_hidden=8)
    ms = MultiScaleConfig(scales=[[16, 8], [8, 16]], selected=[4, 2])
    kw = dict(method=method, rank=2, prompt_dim=4, multiscale=ms)
    kw.update(peft)
    return ModelConfig(num_classes=4, encoder=enc, tokenizer=tok, head=HeadConfig(hidden=12, dropout=0.5),
                       peft=PeftConfig(**kw))


def randomize_trainables(model, seed=0, std=0.3):
    """Give zero-initialised adapter factors non-zero values so every path is live."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if p.requires_grad:
            p.data = (p.data + rng.normal(0.0, std, size=p.shape)).astype(p.data.dtype)


def numeric_grad(f, param, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. every element of ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
