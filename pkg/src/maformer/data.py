"""Datasets: seeded synthetic texture layouts and a plain image-folder loader.

SyntheticShapes
---------------
Each 32x32 (or larger, multiple of 2) image is a 2x2 grid of cells. Every cell
carries one of four textures (horizontal stripes, vertical stripes,
checkerboard, diagonal stripes) with a random phase. A class is a fixed
assignment of textures to the four cells. Classes are drawn in pairs that
share the same multiset of textures, so counting textures is not enough: a
model has to read the local texture *and* where in the image it sits.

Per-sample nuisance: random foreground/background colours, a random global
translation of up to ``jitter`` pixels (cyclic) and Gaussian pixel noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import permutations
from pathlib import Path

import numpy as np

from .config import ConfigError

SYNTHETIC = "synthetic_shapes"
IMAGE_FOLDER = "image_folder"
NUM_TEXTURES = 4
MEAN, STD = 0.5, 0.25


@dataclass
class DatasetSpec:
    kind: str = SYNTHETIC
    image_size: int = 32
    num_classes: int = 10
    train_size: int = 2000
    val_size: int = 500
    seed: int = 0
    root: str | None = None
    hflip: bool = False
    noise: float = 0.6
    jitter: int = 4

    def __post_init__(self):
        if self.kind not in (SYNTHETIC, IMAGE_FOLDER):
            raise ConfigError(f"dataset.kind: unknown kind {self.kind!r}")
        if self.kind == IMAGE_FOLDER and not self.root:
            raise ConfigError("dataset.root: required for image_folder datasets")
        if self.image_size <= 0 or self.image_size % 2:
            raise ConfigError("dataset.image_size: must be a positive even number")
        if self.kind == SYNTHETIC and not 2 <= self.num_classes <= 24:
            raise ConfigError("dataset.num_classes: synthetic_shapes supports 2..24 classes")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"dataset.{bad[0]}: unknown field")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class Split:
    images: np.ndarray  # (N, 3, H, W) float32, normalised
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)


def class_layouts(num_classes: int, seed: int = 1234) -> np.ndarray:
    """``(num_classes, 4)`` texture ids per cell, in pairs sharing a multiset."""
    rng = np.random.default_rng(seed)
    layouts: list[tuple] = []
    seen_multisets = set()
    while len(layouts) < num_classes:
        ms = tuple(sorted(rng.integers(0, NUM_TEXTURES, size=4)))
        if ms in seen_multisets:
            continue
        perms = sorted(set(permutations(ms)))
        if len(perms) < 2:
            continue
        seen_multisets.add(ms)
        pick = rng.choice(len(perms), size=2, replace=False)
        for i in pick:
            if len(layouts) < num_classes:
                layouts.append(perms[i])
    return np.array(layouts, dtype=np.int64)


def _texture(kind: int, size: int, phase_y: int, phase_x: int, period: int = 4) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) + phase_y, np.arange(size) + phase_x, indexing="ij")
    half = period // 2
    if kind == 0:
        return ((yy // half) % 2).astype(np.float64)
    if kind == 1:
        return ((xx // half) % 2).astype(np.float64)
    if kind == 2:
        return (((yy // half) + (xx // half)) % 2).astype(np.float64)
    return (((yy + xx) // half) % 2).astype(np.float64)


def synthetic_shapes(spec: DatasetSpec, n: int, seed: int) -> Split:
    rng = np.random.default_rng(seed)
    s = spec.image_size
    cell = s // 2
    layouts = class_layouts(spec.num_classes)
    labels = rng.integers(0, spec.num_classes, size=n)
    images = np.empty((n, 3, s, s), dtype=np.float64)
    for i in range(n):
        pattern = np.empty((s, s))
        lay = layouts[labels[i]]
        for c in range(4):
            r0, c0 = (c // 2) * cell, (c % 2) * cell
            py, px = rng.integers(0, 4, size=2)
            pattern[r0:r0 + cell, c0:c0 + cell] = _texture(lay[c], cell, py, px)
        fg = rng.uniform(0.55, 1.0, size=3)
        bg = rng.uniform(0.0, 0.45, size=3)
        if rng.random() < 0.5:
            fg, bg = bg, fg
        img = bg[:, None, None] + (fg - bg)[:, None, None] * pattern[None]
        if spec.jitter:
            dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            img = np.roll(img, (dy, dx), axis=(1, 2))
        img += rng.normal(0.0, spec.noise, size=img.shape)
        images[i] = img
    return Split(((images - MEAN) / STD).astype(np.float32), labels.astype(np.int64))


def image_folder(spec: DatasetSpec, split: str) -> Split:
    """``root/<split>/<class_name>/*.{png,jpg}``; classes sorted by name."""
    from PIL import Image

    base = Path(spec.root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"image folder split not found: {base}")
    classes = sorted(p.name for p in base.iterdir() if p.is_dir())
    imgs, labels = [], []
    for k, name in enumerate(classes):
        for f in sorted((base / name).iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            with Image.open(f) as im:
                im = im.convert("RGB").resize((spec.image_size, spec.image_size), Image.BILINEAR)
                imgs.append(np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0)
            labels.append(k)
    if not imgs:
        raise FileNotFoundError(f"no images under {base}")
    arr = (np.stack(imgs) - MEAN) / STD
    return Split(arr.astype(np.float32), np.array(labels, dtype=np.int64))


def load_splits(spec: DatasetSpec) -> tuple[Split, Split]:
    if spec.kind == SYNTHETIC:
        # train and val come from disjoint seed streams
        return (synthetic_shapes(spec, spec.train_size, spec.seed * 2 + 0),
                synthetic_shapes(spec, spec.val_size, spec.seed * 2 + 1))
    return image_folder(spec, "train"), image_folder(spec, "val")


def batches(split: Split, batch_size: int, rng: np.random.Generator | None = None, hflip: bool = False):
    """Yield ``(images, labels)`` mini-batches; shuffled when ``rng`` is given."""
    n = len(split)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = split.images[idx]
        if hflip and rng is not None:
            flip = rng.random(len(idx)) < 0.5
            x = x.copy()
            x[flip] = x[flip][..., ::-1]
        yield x, split.labels[idx]
