"""Phantom volume generation, slice extraction, splitting and normalization."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Label(IntEnum):
    HGG = 0
    LGG = 1


@dataclass
class VolumeSample:
    """A 3D multi-channel scan with per-channel binary tumor masks."""

    id: str
    voxels: np.ndarray  # float32, (channels, side, side)
    masks: np.ndarray   # uint8 {0,1}, same shape as voxels
    label: Label

    def __post_init__(self):
        if self.voxels.shape != self.masks.shape:
            raise ValueError("voxels and masks must have identical shape")
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 1:
            raise ValueError("expected (channels, H, W) with channels >= 1")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValueError("masks must be binary")

    @property
    def channels(self) -> int:
        return self.voxels.shape[0]


@dataclass
class SliceSample:
    """One single-channel image with its aligned binary mask."""

    image: np.ndarray  # float32, (side, side)
    mask: np.ndarray   # uint8 {0,1}, (side, side)
    label: Label
    parent_id: str


@dataclass
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")


@dataclass
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


def _star_convex_mask(side, rng, center, base_radius, noise_amp, n_harmonics):
    """Fill a star-convex blob: pixel is inside iff its distance from the
    center is below a per-angle radius built from random low harmonics."""
    coeffs = rng.uniform(-1.0, 1.0, size=n_harmonics)
    phases = rng.uniform(0.0, 2 * np.pi, size=n_harmonics)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    theta = np.arctan2(dy, dx)
    dist = np.hypot(dy, dx)

    wobble = np.zeros_like(theta)
    for k in range(n_harmonics):
        wobble += coeffs[k] * np.cos((k + 1) * theta + phases[k]) / (k + 1)
    radius = base_radius * (1.0 + noise_amp * wobble)
    radius = np.maximum(radius, 2.0)
    return (dist <= radius).astype(np.uint8)


def generate_phantom(label: Label, channels: int, seed: int, side: int = 240) -> VolumeSample:
    """Deterministic synthetic head volume with a class-dependent tumor.

    HGG volumes carry a large, heavily wobbled high-intensity blob; LGG a
    small smooth one. Every channel has a nonempty mask.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    rng = np.random.default_rng([int(label), channels, seed, side])
    scale = side / 240.0

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = cx = (side - 1) / 2.0
    # elliptical head with a soft radial intensity falloff
    ry, rx = 0.45 * side, 0.38 * side
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    head = (r2 <= 1.0)
    base = 0.35 * (1.0 - 0.5 * r2) * head

    if label == Label.HGG:
        radius_range = (30.0 * scale, 60.0 * scale)
        noise_amp, n_harm = 0.45, 8
    else:
        radius_range = (8.0 * scale, 20.0 * scale)
        noise_amp, n_harm = 0.08, 2

    base_radius = rng.uniform(*radius_range)
    # tumor center well inside the head so the blob stays in frame
    tc = (cy + rng.uniform(-0.15, 0.15) * side, cx + rng.uniform(-0.12, 0.12) * side)

    voxels = np.empty((channels, side, side), dtype=np.float32)
    masks = np.empty((channels, side, side), dtype=np.uint8)
    for c in range(channels):
        # per-channel jitter mimics adjacent slices through one 3D tumor
        ch_radius = base_radius * rng.uniform(0.85, 1.15)
        ch_center = (tc[0] + rng.uniform(-3, 3) * scale, tc[1] + rng.uniform(-3, 3) * scale)
        mask = _star_convex_mask(side, rng, ch_center, ch_radius, noise_amp, n_harm)
        mask &= head.astype(np.uint8)
        if mask.sum() == 0:  # pathological center draw; fall back to a small disc
            disc = (yy - ch_center[0]) ** 2 + (xx - ch_center[1]) ** 2 <= (3.0 * scale) ** 2
            mask = (disc & head).astype(np.uint8)
        texture = rng.normal(0.0, 0.02, size=(side, side))
        img = base + texture * head + 0.65 * mask
        voxels[c] = img.astype(np.float32)
        masks[c] = mask
    return VolumeSample(id=f"{label.name.lower()}-{seed:06d}", voxels=voxels, masks=masks, label=label)


def extract_slices(volume: VolumeSample) -> list[SliceSample]:
    """Every channel becomes one sample, inheriting the volume's label."""
    return [
        SliceSample(
            image=volume.voxels[c].copy(),
            mask=volume.masks[c].copy(),
            label=volume.label,
            parent_id=volume.id,
        )
        for c in range(volume.channels)
    ]


def stratified_split(volumes: list[VolumeSample], spec: SplitSpec):
    """Patient-level split: all slices of one volume land on the same side.

    Per class, train count = floor(train_fraction * n); the remainder tests.
    """
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for label in Label:
        group = [v for v in volumes if v.label == label]
        if not group:
            raise ValueError(f"no volumes for class {label.name}")
        group = sorted(group, key=lambda v: v.id)
        order = rng.permutation(len(group))
        n_train = int(np.floor(spec.train_fraction * len(group)))
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    return train, test


def fit_normalizer(train: list[SliceSample]) -> NormStats:
    """Population mean/std over all training pixels jointly."""
    if not train:
        raise ValueError("empty training set")
    pixels = np.concatenate([s.image.ravel() for s in train])
    mean = float(pixels.mean())
    std = float(pixels.std())
    if std == 0:
        raise ValueError("pixel std is zero; cannot normalize")
    return NormStats(mean=mean, std=std)


def apply_normalizer(slices: list[SliceSample], stats: NormStats) -> list[SliceSample]:
    """Standardize images with the given stats; masks untouched."""
    return [
        SliceSample(
            image=((s.image - stats.mean) / stats.std).astype(np.float32),
            mask=s.mask.copy(),
            label=s.label,
            parent_id=s.parent_id,
        )
        for s in slices
    ]
