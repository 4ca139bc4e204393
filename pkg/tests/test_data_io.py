import numpy as np
import pytest
from scipy.spatial.distance import cdist, pdist

from pointlora.checkpoint import ALIGN, CheckpointFormatError, decode, encode, load_backbone, load_checkpoint, \
    save_checkpoint
from pointlora.config import DataConfig
from pointlora.data import ParseError, SchemaError, generate_synthetic_dataset, load_manifest, \
    load_point_cloud_file, parse_xyz, read_dataset, sample_shape, save_point_cloud_file
from pointlora.model import build_model, merge_adapters

from conftest import randomize_trainables, small_config


# synthetic data


def test_sphere_radius_without_noise(rng):
    pts = sample_shape("sphere", 512, rng, noise=0.0)
    assert np.abs(np.linalg.norm(pts, axis=1) - 1).max() < 1e-6


@pytest.mark.parametrize("kind", ["sphere", "box", "torus", "cylinder"])
def test_shapes_fit_the_unit_sphere(kind, rng):
    pts = sample_shape(kind, 256, rng, rotation="none")
    assert pts.shape == (256, 3)
    assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0)


def test_synthetic_dataset_split_and_determinism():
    cfg = DataConfig(per_class=10, num_points=64)
    train, test = generate_synthetic_dataset(cfg)
    again, _ = generate_synthetic_dataset(cfg)
    assert len(train) == 32 and len(test) == 8
    assert np.bincount([c.label for c in train]).tolist() == [8] * 4
    assert np.bincount([c.label for c in test]).tolist() == [2] * 4
    assert all(np.array_equal(a.points, b.points) for a, b in zip(train, again))
    with pytest.raises(ValueError):
        generate_synthetic_dataset(DataConfig(classes=["sphere"]))
    with pytest.raises(ValueError):
        generate_synthetic_dataset(DataConfig(classes=["sphere", "cone"]))


def test_synthetic_classes_are_separable():
    """5-NN on pairwise-distance histograms clears 80% at sigma=0.01 under SO(3)."""
    train, test = generate_synthetic_dataset(DataConfig(per_class=50, noise=0.01, rotation="so3"))

    def hist(cloud):
        d = pdist(cloud.points[:256])
        return np.histogram(d, bins=32, range=(0, 2), density=True)[0]

    xtr, xte = np.stack([hist(c) for c in train]), np.stack([hist(c) for c in test])
    ytr, yte = np.array([c.label for c in train]), np.array([c.label for c in test])
    nn = np.argsort(cdist(xte, xtr), axis=1)[:, :5]
    pred = np.array([np.bincount(ytr[row], minlength=4).argmax() for row in nn])
    assert (pred == yte).mean() > 0.8


# XYZ files and manifests


def test_parse_xyz_examples():
    assert len(parse_xyz("0 0 0\n1 0 0")) == 2
    assert len(parse_xyz("# header\n0 0 0\n\n")) == 1
    with pytest.raises(ParseError, match=":1:"):
        parse_xyz("0 0")
    with pytest.raises(ParseError, match=":2:"):
        parse_xyz("0 0 0\n1 x 2")
    with pytest.raises(ValueError):
        parse_xyz("# nothing\n")


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    save_point_cloud_file(tmp_path / "a.xyz", pts)
    assert np.array_equal(load_point_cloud_file(tmp_path / "a.xyz").points, pts)


def _write_clouds(root, n=2):
    for i in range(n):
        (root / f"c{i}.xyz").write_text("0 0 0\n1 1 1\n")


def test_manifest_examples(tmp_path):
    _write_clouds(tmp_path)
    (tmp_path / "m.csv").write_text("c0.xyz,0\nc1.xyz,1\n")
    entries = load_manifest(tmp_path / "m.csv")
    assert [e.label for e in entries] == [0, 1]
    assert entries[0].path == tmp_path / "c0.xyz"
    assert [c.label for c in read_dataset(entries)] == [0, 1]


def test_manifest_errors(tmp_path):
    _write_clouds(tmp_path)
    (tmp_path / "dup.csv").write_text("c0.xyz,0\nc0.xyz,1\n")
    with pytest.raises(SchemaError):
        load_manifest(tmp_path / "dup.csv")
    (tmp_path / "bad.csv").write_text("c0.xyz,zero\n")
    with pytest.raises(ParseError):
        load_manifest(tmp_path / "bad.csv")
    (tmp_path / "missing.csv").write_text("gone.xyz,0\n")
    with pytest.raises(FileNotFoundError, match="gone.xyz"):
        load_manifest(tmp_path / "missing.csv")
    (tmp_path / "empty.csv").write_text("# nothing\n")
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "empty.csv")


# checkpoints


def _trained_model():
    model = build_model(small_config())
    randomize_trainables(model)
    model.train()
    model([np.random.default_rng(i).normal(size=(64, 3)) for i in range(4)])  # moves BN statistics
    return model.eval()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = _trained_model()
    save_checkpoint(model, None, tmp_path / "a.plrk")
    loaded, registry = load_checkpoint(tmp_path / "a.plrk")
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data) and p1.requires_grad == p2.requires_grad
        assert registry[n2] == p2.requires_grad
    for (n1, b1), (_, b2) in zip(model.named_buffers(), loaded.named_buffers()):
        assert np.array_equal(b1, b2), n1
    save_checkpoint(loaded, registry, tmp_path / "b.plrk")
    assert (tmp_path / "a.plrk").read_bytes() == (tmp_path / "b.plrk").read_bytes()


def test_checkpoint_layout(tmp_path):
    model = _trained_model()
    save_checkpoint(model, None, tmp_path / "a.plrk")
    blob = (tmp_path / "a.plrk").read_bytes()
    assert blob[:4] == b"PLRK"
    config, tensors, frozen = decode(blob)
    assert config["model"]["peft"]["rank"] == 2
    assert frozen["encoder.blocks.0.fc1.weight"] and not frozen["head.fc1.weight"]
    assert len(blob) % ALIGN == 0
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_format_errors(tmp_path):
    blob = encode({"w": np.ones((3, 5), np.float32)}, {"w": True}, {})
    assert decode(blob)[1]["w"].shape == (3, 5)
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="version"):
        decode(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        decode(blob[:-8])
    with pytest.raises(CheckpointFormatError):
        decode(blob[:10])


def test_truncated_checkpoint_yields_no_model(tmp_path):
    model = _trained_model()
    path = tmp_path / "a.plrk"
    save_checkpoint(model, None, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_schema_mismatch(tmp_path):
    model = _trained_model()
    save_checkpoint(model, None, tmp_path / "a.plrk")
    config, tensors, frozen = decode((tmp_path / "a.plrk").read_bytes())
    tensors.pop("head.fc3.bias")
    frozen.pop("head.fc3.bias")
    (tmp_path / "b.plrk").write_bytes(encode(tensors, frozen, config))
    with pytest.raises(SchemaError, match="head.fc3.bias"):
        load_checkpoint(tmp_path / "b.plrk")


def test_merged_checkpoint_has_no_adapter_factors(tmp_path):
    model = _trained_model()
    save_checkpoint(model, None, tmp_path / "a.plrk")
    merge_adapters(model)
    save_checkpoint(model, None, tmp_path / "m.plrk")
    _, tensors, _ = decode((tmp_path / "m.plrk").read_bytes())
    assert not any(n.endswith(".down") or n.endswith(".up") for n in tensors)
    loaded, _ = load_checkpoint(tmp_path / "m.plrk")
    assert loaded.cfg.peft.merged and not any(layer.adapters for _, layer in loaded.adapted_layers())


def test_load_backbone_copies_only_backbone(tmp_path):
    src = _trained_model()
    save_checkpoint(src, None, tmp_path / "a.plrk")
    dst = build_model(small_config(), backbone_seed=7)
    head_before = dst.head.fc1.weight.data.copy()
    assert load_backbone(dst, tmp_path / "a.plrk") > 0
    assert np.array_equal(dst.encoder.blocks[0].fc1.weight.data, src.encoder.blocks[0].fc1.weight.data)
    assert np.array_equal(dst.head.fc1.weight.data, head_before)
