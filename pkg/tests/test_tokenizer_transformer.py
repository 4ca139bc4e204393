import numpy as np
import pytest

from pointlora import tensor as T
from pointlora.tokenizer import CLASS, PATCH, PROMPT, MiniPointNet, PositionalEmbedding, TokenSequence, \
    embed_patches
from pointlora.transformer import Block, Encoder, EncoderConfig, attention_forward, ffn_forward, pool_features

from conftest import numeric_grad, rel_error


@pytest.fixture
def net():
    return MiniPointNet(np.random.default_rng(0), dim=8, h1=6, h2=10)


def test_mini_pointnet_permutation_invariance(net, rng):
    patch = rng.normal(size=(2, 5, 7, 3))
    perm = rng.permutation(7)
    a = net(patch).data
    b = net(patch[:, :, perm]).data
    assert a.shape == (2, 5, 8)
    assert np.abs(a - b).max() < 1e-6


def test_mini_pointnet_patch_independence(net, rng):
    patch = rng.normal(size=(1, 3, 4, 3))
    doubled = np.concatenate([patch, patch[:, :1]], axis=1)
    out = net(doubled).data
    assert np.array_equal(out[0, 0], out[0, 3])
    # reordering patches reorders tokens identically
    assert np.array_equal(net(patch[:, ::-1]).data, net(patch).data[:, ::-1])


def test_zero_patch_with_zero_final_layer(net):
    net.fc4.weight.data[:] = 0
    net.fc4.bias.data[:] = 0
    assert np.array_equal(net(np.zeros((1, 2, 4, 3))).data, np.zeros((1, 2, 8)))


def test_embed_patches_returns_patch_sequence(net, rng):
    seq = embed_patches(rng.normal(size=(1, 3, 4, 3)), rng.normal(size=(1, 3, 3)), net)
    assert seq.roles == (PATCH,) * 3 and seq.width == 8


def test_positional_embedding(rng):
    pos = PositionalEmbedding(rng, dim=8, hidden=5)
    c = np.repeat(rng.normal(size=(1, 1, 3)), 4, axis=1)
    out = pos(c).data
    assert np.array_equal(out[0, 0], out[0, 3])
    assert np.array_equal(pos(c).data, out)
    for p in pos.parameters():
        p.data[:] = 0
    assert np.array_equal(pos(c).data, np.zeros((1, 4, 8)))


def test_token_sequence_roles():
    x = T.as_tensor(np.zeros((1, 4, 2)))
    TokenSequence(x, np.zeros((1, 4, 3)), (CLASS, PATCH, PATCH, PROMPT))
    with pytest.raises(ValueError):
        TokenSequence(x, np.zeros((1, 4, 3)), (PATCH, CLASS, PATCH, PATCH))
    with pytest.raises(ValueError):
        TokenSequence(x, np.zeros((1, 4, 3)), (CLASS, PROMPT, PATCH, PATCH))


# transformer


@pytest.fixture
def block(rng):
    return Block(rng, EncoderConfig(depth=1, dim=8, heads=2, ffn_dim=16, drop_path_rate=0.0))


def test_single_token_attention(block, rng):
    x = T.as_tensor(rng.normal(size=(1, 1, 8)))
    out = attention_forward(x, block).data
    assert np.array_equal(block.attn.last_weights, np.ones((1, 2, 1, 1), dtype=np.float32))
    v = block.attn.qkv(block.norm1(x)).data[..., 16:]
    assert np.allclose(out, x.data + v @ block.attn.proj.weight.data + block.attn.proj.bias.data, atol=1e-6)


def test_attention_symmetry_and_permutation(block, rng):
    same = T.as_tensor(np.repeat(rng.normal(size=(1, 1, 8)), 5, axis=1))
    out = attention_forward(same, block).data
    assert np.allclose(out, out[:, :1], atol=1e-6)
    x = rng.normal(size=(2, 6, 8))
    perm = np.r_[0, 1 + rng.permutation(5)]
    a = attention_forward(T.as_tensor(x), block).data
    b = attention_forward(T.as_tensor(x[:, perm]), block).data
    assert np.allclose(a[:, perm], b, atol=1e-5)
    assert np.allclose(block.attn.last_weights.sum(-1), 1.0, atol=1e-6)


def test_ffn_residual_identity_and_pointwise(block, rng):
    x = rng.normal(size=(1, 4, 8))
    out = ffn_forward(T.as_tensor(x), block).data
    y = x.copy()
    y[0, 2] += 5.0
    out2 = ffn_forward(T.as_tensor(y), block).data
    assert np.array_equal(np.delete(out, 2, axis=1), np.delete(out2, 2, axis=1))
    block.fc2.weight.data[:] = 0
    block.fc2.bias.data[:] = 0
    assert np.array_equal(ffn_forward(T.as_tensor(x), block).data, x.astype(np.float32))


def test_ffn_matches_primitive_composition(f64, rng):
    blk = Block(rng, EncoderConfig(depth=1, dim=8, heads=2, ffn_dim=16))
    x = rng.normal(size=(3, 8))
    ln = blk.norm2
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    h = (x - mu) / np.sqrt(var + ln.eps) * ln.weight.data + ln.bias.data
    h = h @ blk.fc1.weight.data + blk.fc1.bias.data
    from scipy.special import ndtr
    h = h * ndtr(h)
    ref = x + h @ blk.fc2.weight.data + blk.fc2.bias.data
    assert np.allclose(ffn_forward(T.as_tensor(x), blk).data, ref, atol=1e-12)


def test_encoder_composition(f64, rng):
    cfg = EncoderConfig(depth=2, dim=8, heads=2, ffn_dim=16, drop_path_rate=0.2)
    enc = Encoder(rng, cfg).eval()
    x = T.as_tensor(rng.normal(size=(2, 4, 8)))
    manual = enc.norm(enc.blocks[1](enc.blocks[0](x)))
    assert np.array_equal(enc(x).data, manual.data)
    assert np.array_equal(enc(x, np.random.default_rng(0)).data, enc(x).data)  # eval ignores drop path
    one = Encoder(np.random.default_rng(5), EncoderConfig(depth=1, dim=8, heads=2, ffn_dim=16)).eval()
    assert np.array_equal(one(x).data, one.norm(one.blocks[0](x)).data)


def test_drop_path_rates_ramp_linearly(rng):
    enc = Encoder(rng, EncoderConfig(depth=4, dim=8, heads=2, ffn_dim=16, drop_path_rate=0.3))
    assert [b.drop_path_rate for b in enc.blocks] == pytest.approx([0.0, 0.1, 0.2, 0.3])


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(dim=10, heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(depth=0)
    with pytest.raises(ValueError):
        EncoderConfig(drop_path_rate=1.0)


def test_pool_features(rng):
    tok = rng.normal(size=(1, 4, 3))
    roles = (CLASS, PATCH, PATCH, PROMPT)
    out = pool_features(T.as_tensor(tok), roles).data
    assert np.allclose(out[0, :3], tok[0, 0]) and np.allclose(out[0, 3:], tok[0, 1:].max(0))
    single = pool_features(T.as_tensor(tok[:, :2]), roles[:2]).data
    assert np.allclose(single[0], np.r_[tok[0, 0], tok[0, 1]])
    no_prompt = pool_features(T.as_tensor(tok), roles, include_prompts=False).data
    assert np.allclose(no_prompt[0, 3:], tok[0, 1:3].max(0))
    swapped = pool_features(T.as_tensor(tok[:, [0, 2, 1, 3]]), roles).data
    assert np.array_equal(swapped, out)
    dup = pool_features(T.as_tensor(tok[:, [0, 1, 2, 3, 3]]), roles + (PROMPT,)).data
    assert np.array_equal(dup, out)
    with pytest.raises(ValueError):
        pool_features(T.as_tensor(tok), (PATCH,) * 4)


def test_pooled_encoder_gradient(f64, rng):
    """Scalar loss on pooled features of a tiny encoder vs finite differences."""
    enc = Encoder(rng, EncoderConfig(depth=2, dim=8, heads=2, ffn_dim=16, drop_path_rate=0.0))
    x = T.as_tensor(rng.normal(size=(2, 4, 8)))
    roles = (CLASS,) + (PATCH,) * 3
    w = T.as_tensor(rng.normal(size=(2, 16)))
    f = lambda: (pool_features(enc(x), roles) * w).sum()
    f().backward()
    for name, p in enc.named_parameters():
        assert rel_error(p.grad, numeric_grad(lambda: float(f().data), p)) < 1e-3, name
