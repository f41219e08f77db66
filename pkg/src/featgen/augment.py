"""Joint image/mask stochastic augmentation: flips, affine warps, elastic distortion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter, map_coordinates


@dataclass(frozen=True)
class AugmentationConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    elastic_alpha: float = 720.0
    elastic_sigma: float = 24.0
    max_rotation: float = 20.0   # degrees
    max_shift: float = 0.10      # fraction of side, per axis
    max_shear: float = 0.05      # horizontal shear coefficient
    zoom_range: float = 0.10     # scale sampled in [1-z, 1+z]

    def __post_init__(self):
        for p in (self.p_hflip, self.p_vflip):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        if self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")
        if not 0.0 <= self.zoom_range < 1.0:
            raise ValueError("zoom_range must be in [0, 1)")
        if self.elastic_alpha < 0:
            raise ValueError("elastic_alpha must be nonnegative")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(p_hflip=0.0, p_vflip=0.0, elastic_alpha=0.0, elastic_sigma=1.0,
                   max_rotation=0.0, max_shift=0.0, max_shear=0.0, zoom_range=0.0)


@dataclass(frozen=True)
class AugmentationDraw:
    """A fully sampled, replayable realization of one augmentation."""

    hflip: bool
    vflip: bool
    angle: float        # degrees
    shear: float
    zoom: float         # 1.0 = no zoom
    shift: tuple        # (dy, dx) fractions of side length
    elastic_alpha: float
    elastic_sigma: float
    elastic_seed: int

    @property
    def is_identity(self) -> bool:
        return (not self.hflip and not self.vflip and self.angle == 0.0
                and self.shear == 0.0 and self.zoom == 1.0
                and self.shift == (0.0, 0.0) and self.elastic_alpha == 0.0)

    @property
    def has_affine(self) -> bool:
        return (self.angle != 0.0 or self.shear != 0.0 or self.zoom != 1.0
                or self.shift != (0.0, 0.0))


def draw(config: AugmentationConfig, seed: int) -> AugmentationDraw:
    """Sample one realization; each parameter uniform within its range."""
    rng = np.random.default_rng(seed)
    return AugmentationDraw(
        hflip=bool(rng.random() < config.p_hflip),
        vflip=bool(rng.random() < config.p_vflip),
        angle=float(rng.uniform(-config.max_rotation, config.max_rotation)) if config.max_rotation else 0.0,
        shear=float(rng.uniform(-config.max_shear, config.max_shear)) if config.max_shear else 0.0,
        zoom=float(rng.uniform(1 - config.zoom_range, 1 + config.zoom_range)) if config.zoom_range else 1.0,
        shift=(
            float(rng.uniform(-config.max_shift, config.max_shift)) if config.max_shift else 0.0,
            float(rng.uniform(-config.max_shift, config.max_shift)) if config.max_shift else 0.0,
        ),
        elastic_alpha=config.elastic_alpha,
        elastic_sigma=config.elastic_sigma,
        elastic_seed=int(rng.integers(0, 2**31 - 1)),
    )


def elastic_field(shape, alpha: float, sigma: float, seed: int) -> np.ndarray:
    """Smoothed-random displacement field, (2, H, W): per axis,
    alpha * gaussian_filter(uniform noise in [-1, 1], sigma)."""
    if alpha < 0 or sigma <= 0:
        raise ValueError("need alpha >= 0 and sigma > 0")
    if alpha == 0:
        return np.zeros((2,) + tuple(shape), dtype=np.float64)
    rng = np.random.default_rng(seed)
    field = np.empty((2,) + tuple(shape), dtype=np.float64)
    for axis in range(2):
        noise = rng.uniform(-1.0, 1.0, size=shape)
        field[axis] = gaussian_filter(noise, sigma, mode="reflect") * alpha
    return field


def _affine_inverse_map(d: AugmentationDraw, shape, include_flips: bool) -> np.ndarray:
    """Homogeneous 3x3 matrix mapping OUTPUT (row, col) -> INPUT (row, col)
    for the chain flips -> rotation -> shear -> zoom -> shift about center."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    def about_center(m):
        pre = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1]], dtype=np.float64)
        post = np.array([[1, 0, cy], [0, 1, cx], [0, 0, 1]], dtype=np.float64)
        return post @ m @ pre

    forward = np.eye(3)
    if include_flips:
        fy = -1.0 if d.vflip else 1.0
        fx = -1.0 if d.hflip else 1.0
        forward = about_center(np.diag([fy, fx, 1.0])) @ forward
    if d.angle:
        t = np.deg2rad(d.angle)
        rot = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])
        forward = about_center(rot) @ forward
    if d.shear:
        shear = np.array([[1, 0, 0], [d.shear, 1, 0], [0, 0, 1]], dtype=np.float64)
        forward = about_center(shear) @ forward
    if d.zoom != 1.0:
        forward = about_center(np.diag([d.zoom, d.zoom, 1.0])) @ forward
    if d.shift != (0.0, 0.0):
        trans = np.array([[1, 0, d.shift[0] * h], [0, 1, d.shift[1] * w], [0, 0, 1]])
        forward = trans @ forward
    return np.linalg.inv(forward)


def _warp_affine(image, mask, matrix):
    img = affine_transform(image.astype(np.float32), matrix[:2, :2], offset=matrix[:2, 2],
                           order=1, mode="constant", cval=0.0)
    msk = affine_transform(mask, matrix[:2, :2], offset=matrix[:2, 2],
                           order=0, mode="constant", cval=0)
    return img, msk


def _warp_elastic(image, mask, d: AugmentationDraw):
    field = elastic_field(image.shape, d.elastic_alpha, d.elastic_sigma, d.elastic_seed)
    yy, xx = np.mgrid[0:image.shape[0], 0:image.shape[1]].astype(np.float64)
    coords = np.stack([yy + field[0], xx + field[1]])
    img = map_coordinates(image.astype(np.float32), coords, order=1, mode="constant", cval=0.0)
    msk = map_coordinates(mask, coords, order=0, mode="constant", cval=0)
    return img, msk


def apply(image: np.ndarray, mask: np.ndarray, d: AugmentationDraw):
    """Apply the same transform to image (bilinear) and mask (nearest).

    Order: flips -> rotation -> shear -> zoom -> shift -> elastic. Exposed
    borders fill with 0. Flips are done by slicing so flip-only draws are
    exact involutions.
    """
    if image.shape != mask.shape:
        raise ValueError("image and mask must have the same shape")
    img, msk = image.copy(), mask.copy()
    if d.is_identity:
        return img, msk
    if d.hflip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if d.vflip:
        img, msk = img[::-1, :], msk[::-1, :]
    if d.has_affine:
        img, msk = _warp_affine(img, msk, _affine_inverse_map(d, image.shape, include_flips=False))
    if d.elastic_alpha > 0:
        img, msk = _warp_elastic(img, msk, d)
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def apply_inverse(image: np.ndarray, mask: np.ndarray, d: AugmentationDraw):
    """Undo a pure geometric draw (no elastic part)."""
    if d.elastic_alpha > 0:
        raise ValueError("elastic draws are not invertible")
    if image.shape != mask.shape:
        raise ValueError("image and mask must have the same shape")
    img, msk = image.copy(), mask.copy()
    if d.has_affine:
        # inverse warp: the inverse transform's pull-back map is the forward map
        forward = np.linalg.inv(_affine_inverse_map(d, image.shape, include_flips=False))
        img, msk = _warp_affine(img, msk, forward)
    if d.vflip:
        img, msk = img[::-1, :], msk[::-1, :]
    if d.hflip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)
