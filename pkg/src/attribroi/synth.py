"""Synthetic parcellated images with class signal planted in known ROIs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .atlas import RoiAtlas
from .exceptions import ConfigError


@dataclass
class SynthSpec:
    image_size: int = 64
    n_rois: int = 16
    signal_rois: tuple = (3, 7, 11)
    effect_size: float = 0.3
    noise_sigma: float = 0.1
    n_per_class: int = 200
    seed: int = 0
    atlas_mode: str = "voronoi"

    def validate(self):
        if self.image_size < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if self.n_rois < 2 or self.n_rois > self.image_size**2:
            raise ConfigError(f"n_rois must lie in 2..{self.image_size**2}, got {self.n_rois}")
        bad = [r for r in self.signal_rois if not 1 <= r <= self.n_rois]
        if bad:
            raise ConfigError(f"signal_rois {bad} not in atlas ids 1..{self.n_rois}")
        # zero is allowed: it is the null construction with identical classes
        if not self.effect_size >= 0:
            raise ConfigError(f"effect_size must be non-negative, got {self.effect_size}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be positive, got {self.n_per_class}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["signal_rois"] = list(self.signal_rois)
        return d


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, H, W)
    labels: np.ndarray
    subject_ids: list
    atlas: RoiAtlas
    spec: SynthSpec | None = None

    def __len__(self):
        return len(self.labels)


def _synthetic_atlas(labels, n_rois):
    names = {i: f"roi_{i}" for i in range(1, n_rois + 1)}
    brodmann = {i: [f"BA_{i}"] for i in range(1, n_rois + 1)}
    return RoiAtlas(labels=labels, names=names, brodmann=brodmann)


def generate_atlas(image_size, n_rois, seed=0, mode="voronoi"):
    """Seeded parcellation; every pixel gets a label in 1..n_rois.

    ``voronoi`` assigns each pixel to its nearest random site (distinct
    pixels, so every label occurs). ``grid`` splits the image into
    near-equal rectangles, row-major, which keeps unit tests hand-checkable.
    """
    if n_rois < 2:
        raise ConfigError(f"n_rois must be at least 2, got {n_rois}")
    if image_size < 1 or n_rois > image_size**2:
        raise ConfigError(f"cannot place {n_rois} ROIs on a {image_size}x{image_size} grid")
    if mode == "voronoi":
        rng = np.random.default_rng(seed)
        sites = rng.choice(image_size**2, size=n_rois, replace=False)
        sy, sx = np.divmod(sites, image_size)
        yy, xx = np.mgrid[0:image_size, 0:image_size]
        d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
        labels = d2.argmin(axis=-1) + 1
    elif mode == "grid":
        rows = int(np.floor(np.sqrt(n_rois)))
        while n_rois % rows:
            rows -= 1
        cols = n_rois // rows
        if rows > image_size or cols > image_size:
            raise ConfigError(f"grid of {rows}x{cols} does not fit a {image_size}px image")
        r = np.arange(image_size) * rows // image_size
        c = np.arange(image_size) * cols // image_size
        labels = r[:, None] * cols + c[None, :] + 1
    else:
        raise ConfigError(f"unknown atlas mode {mode!r}")
    return _synthetic_atlas(labels.astype(np.int64), n_rois)


def generate_dataset(spec: SynthSpec) -> Dataset:
    """Balanced two-class set: class 0 first, then class 1.

    Every sample draws from its own generator spawned off ``spec.seed``.
    """
    spec.validate()
    atlas = generate_atlas(spec.image_size, spec.n_rois, spec.seed, spec.atlas_mode)
    signal = np.isin(atlas.labels, list(spec.signal_rois))
    n = 2 * spec.n_per_class
    children = np.random.SeedSequence(spec.seed).spawn(n)
    images = np.empty((n, 1, spec.image_size, spec.image_size))
    labels = np.repeat([0, 1], spec.n_per_class)
    for i, (child, label) in enumerate(zip(children, labels)):
        rng = np.random.default_rng(child)
        img = 0.5 + spec.noise_sigma * rng.standard_normal((spec.image_size, spec.image_size))
        if label == 1:
            img = img + spec.effect_size * signal
        images[i, 0] = np.clip(img, 0.0, 1.0)
    subject_ids = [f"sub-{i:04d}" for i in range(n)]
    return Dataset(images=images, labels=labels, subject_ids=subject_ids, atlas=atlas, spec=spec)
