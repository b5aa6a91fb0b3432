"""Augmentation and content-constrained multi-crop views."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError


@dataclass
class AugmentConfig:
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    translate_frac: tuple[float, float] = (-0.10, 0.10)
    flip_h: float = 0.5
    flip_v: float = 0.5
    brightness_frac: tuple[float, float] = (0.5, 1.5)
    contrast_frac: tuple[float, float] = (0.5, 1.5)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentParams:
    angle: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)  # pixels, (rows, cols)
    flip_h: bool = False
    flip_v: bool = False
    brightness: float = 1.0
    contrast: float = 1.0


def draw_params(shape, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    h, w = shape
    return AugmentParams(
        angle=float(rng.uniform(*cfg.rotation_deg)),
        shift=(float(rng.uniform(*cfg.translate_frac) * h), float(rng.uniform(*cfg.translate_frac) * w)),
        flip_h=bool(rng.random() < cfg.flip_h),
        flip_v=bool(rng.random() < cfg.flip_v),
        brightness=float(rng.uniform(*cfg.brightness_frac)),
        contrast=float(rng.uniform(*cfg.contrast_frac)),
    )


def apply_augment(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Rotate, translate, flip, scale brightness, adjust contrast, clamp.

    Contrast is applied about the mean of the nonzero support and only on
    that support, so masked-out pixels stay exactly zero.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("augment expects a 2-D image")
    if p.angle:
        x = ndimage.rotate(x, p.angle, reshape=False, order=1, mode="constant", cval=0.0)
    if p.shift != (0.0, 0.0):
        x = ndimage.shift(x, p.shift, order=1, mode="constant", cval=0.0)
    if p.flip_h:
        x = x[:, ::-1]
    if p.flip_v:
        x = x[::-1, :]
    if p.brightness != 1.0:
        x = x * p.brightness
    if p.contrast != 1.0:
        support = x != 0
        if support.any():
            m = x[support].mean()
            x = np.where(support, m + p.contrast * (x - m), 0.0)
    return np.clip(x, 0.0, 1.0)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_augment(image, draw_params(np.shape(image), cfg, rng))


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

@dataclass
class CropStats:
    crops: int = 0
    fallbacks: int = 0
    attempts: int = 0


@dataclass
class Crop:
    pixels: np.ndarray
    origin: tuple[int, int]
    nonzero_frac: float
    fallback: bool


def nonzero_fraction(x: np.ndarray) -> float:
    return float(np.count_nonzero(x)) / x.size


def constrained_crop(image: np.ndarray, size: int, min_nonzero: float, max_attempts: int,
                     rng: np.random.Generator, stats: CropStats | None = None) -> Crop:
    """Rejection-sample a ``size`` square whose nonzero fraction reaches ``min_nonzero``.

    After ``max_attempts`` misses the densest attempt is returned and the
    fallback counter in ``stats`` is incremented.
    """
    h, w = np.shape(image)
    if size > h or size > w:
        raise DimensionError(f"crop {size} larger than image {(h, w)}")
    if not 0.0 <= min_nonzero <= 1.0:
        raise ContractError("min_nonzero must lie in [0, 1]")
    if max_attempts < 1:
        raise ContractError("max_attempts must be >= 1")
    best = None
    for attempt in range(max_attempts):
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        pix = image[r:r + size, c:c + size]
        frac = nonzero_fraction(pix)
        if frac >= min_nonzero:
            if stats is not None:
                stats.crops += 1
                stats.attempts += attempt + 1
            return Crop(pix.copy(), (r, c), frac, False)
        if best is None or frac > best.nonzero_frac:
            best = Crop(pix.copy(), (r, c), frac, True)
    if stats is not None:
        stats.crops += 1
        stats.fallbacks += 1
        stats.attempts += max_attempts
    return best


@dataclass
class ViewSpec:
    n_global: int = 2
    global_size: int = 32
    n_local: int = 4
    local_size: int = 12
    min_nonzero: float = 0.10
    max_attempts: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewSet:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    min_nonzero_frac: float
    source_id: str | None = None
    fallbacks: int = 0

    @property
    def views(self) -> list[np.ndarray]:
        return self.global_views + self.local_views


def make_views(image: np.ndarray, cfg: AugmentConfig, spec: ViewSpec, rng: np.random.Generator,
               source_id: str | None = None, stats: CropStats | None = None) -> ViewSet:
    """Independent augmentation then constrained crop for each global and local view."""
    h, w = np.shape(image)
    if spec.global_size > min(h, w):
        raise DimensionError(f"image {(h, w)} smaller than global view {spec.global_size}")
    local_stats = CropStats()
    out = {"global": [], "local": []}
    for kind, count, size in (("global", spec.n_global, spec.global_size), ("local", spec.n_local, spec.local_size)):
        for _ in range(count):
            view = augment(image, cfg, rng)
            crop = constrained_crop(view, size, spec.min_nonzero, spec.max_attempts, rng, local_stats)
            out[kind].append(crop.pixels)
    if stats is not None:
        stats.crops += local_stats.crops
        stats.fallbacks += local_stats.fallbacks
        stats.attempts += local_stats.attempts
    return ViewSet(out["global"], out["local"], spec.min_nonzero, source_id, local_stats.fallbacks)


def blob_image(size: int, area_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Zero canvas with one dense disc covering ``area_frac`` of the pixels."""
    radius = np.sqrt(area_frac * size * size / np.pi)
    cy, cx = rng.uniform(radius, size - radius, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    return np.where(disc, rng.uniform(0.3, 1.0, size=(size, size)), 0.0)
