"""Synthetic shape datasets, XYZ text files and dataset manifests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .config import DataConfig
from .geometry import PointCloud

SHAPES = ("sphere", "box", "torus", "cylinder")


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n):
    half = rng.uniform(0.5, 1.0, size=3)
    # faces come in pairs; pick a face pair by area
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    side = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = side * half[axis]
    return pts


def _torus(rng, n):
    big, small = rng.uniform(0.7, 1.0), rng.uniform(0.2, 0.35)
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        # rejection keeps the density uniform over the surface
        keep = rng.uniform(0, big + small, size=2 * n) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


def _cylinder(rng, n):
    radius, height = rng.uniform(0.4, 0.7), rng.uniform(1.0, 1.6)
    side_area, cap_area = 2 * np.pi * radius * height, 2 * np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-height / 2, height / 2, size=n),
                 rng.choice([-height / 2, height / 2], size=n))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], 1)


_SAMPLERS = {"sphere": _sphere, "box": _box, "torus": _torus, "cylinder": _cylinder}


def sample_shape(kind: str, n: int, rng: np.random.Generator, noise: float = 0.0,
                 rotation: str = "so3") -> np.ndarray:
    """Surface samples of one shape, scaled into the unit sphere, jittered, rotated."""
    pts = _SAMPLERS[kind](rng, n)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    if noise:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    if rotation == "so3":
        pts = Rotation.random(random_state=rng).apply(pts)
    elif rotation == "z":
        a = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    elif rotation != "none":
        raise ValueError(f"unknown rotation mode {rotation!r}")
    return pts


def generate_synthetic_dataset(cfg: DataConfig) -> tuple[list[PointCloud], list[PointCloud]]:
    """Balanced labelled clouds with a stratified 80/20 train/test split."""
    if len(cfg.classes) < 2:
        raise ValueError("need at least two classes")
    unknown = set(cfg.classes) - set(SHAPES)
    if unknown:
        raise ValueError(f"unknown shape classes {sorted(unknown)}")
    rng = np.random.default_rng(cfg.seed)
    train, test = [], []
    n_train = int(round(0.8 * cfg.per_class))
    for label, kind in enumerate(cfg.classes):
        clouds = [PointCloud(sample_shape(kind, cfg.num_points, rng, cfg.noise, cfg.rotation), label)
                  for _ in range(cfg.per_class)]
        order = rng.permutation(cfg.per_class)
        train += [clouds[i] for i in order[:n_train]]
        test += [clouds[i] for i in order[n_train:]]
    return train, test


def parse_xyz(text: str, source: str = "<string>") -> PointCloud:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"{source}:{lineno}: expected 3 coordinates, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"{source}:{lineno}: non-numeric coordinate in {line!r}") from None
    if not rows:
        raise ValueError(f"{source}: no points")
    return PointCloud(np.array(rows))


def load_point_cloud_file(path) -> PointCloud:
    path = Path(path)
    return parse_xyz(path.read_text(), str(path))


def save_point_cloud_file(path, points) -> None:
    Path(path).write_text("".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in np.asarray(points)))


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int


def load_manifest(path) -> list[ManifestEntry]:
    """Read ``<relative-path>,<label>`` lines; paths resolve against the manifest's folder."""
    path = Path(path)
    root = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rel, sep, label = line.rpartition(",")
        if not sep or not rel.strip():
            raise ParseError(f"{path}:{lineno}: expected '<path>,<label>'")
        try:
            label = int(label)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: label {label.strip()!r} is not an integer") from None
        target = root / rel.strip()
        if target in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate entry {rel.strip()}")
        if not target.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: missing point cloud file {target}")
        seen.add(target)
        entries.append(ManifestEntry(target, label))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def read_dataset(entries) -> list[PointCloud]:
    clouds = []
    for e in entries:
        cloud = load_point_cloud_file(e.path)
        cloud.label = e.label
        clouds.append(cloud)
    return clouds
