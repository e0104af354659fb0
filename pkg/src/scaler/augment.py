"""Invertible weak spatial augmentations and photometric strong extensions.

Geometry is applied as flip -> rotate -> rescale; :func:`invert_to_reference`
undoes it in reverse order. Flips and quarter turns are exact permutations, so
they invert bit-exactly; rescaling uses half-pixel-centred bilinear
interpolation and is only approximately invertible.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ShapeError

ROTATIONS = (0, 90, 180, 270)
SCALES = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class WeakAug:
    hflip: bool = False
    vflip: bool = False
    rotation: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def geometry(self) -> "WeakAug":
        return self

    def out_size(self, size: int) -> int:
        out = size * self.scale
        if out != int(out) or out < 1:
            raise ShapeError(f"scale {self.scale} does not map side {size} to an integer side")
        return int(out)


IDENTITY = WeakAug()


@dataclass(frozen=True)
class StrongAug:
    """Weak geometry plus pixel-value perturbations; the geometry is shared with ``base``."""

    base: WeakAug
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0
    cutout: tuple[float, float, float] | None = None  # (cy, cx, side) as fractions of the side

    @property
    def geometry(self) -> WeakAug:
        return self.base


@dataclass
class AugPolicy:
    K: int = 12
    seed: int = 0
    scales: tuple[float, ...] = SCALES

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")


def sample_weak(rng: np.random.Generator, scales: tuple[float, ...] = SCALES) -> WeakAug:
    return WeakAug(
        hflip=bool(rng.integers(2)),
        vflip=bool(rng.integers(2)),
        rotation=ROTATIONS[int(rng.integers(4))],
        scale=float(scales[int(rng.integers(len(scales)))]),
    )


def sample_strong(rng: np.random.Generator, base: WeakAug) -> StrongAug:
    brightness = float(rng.uniform(-0.2, 0.2))
    contrast = float(rng.uniform(0.7, 1.3))
    sigma = float(rng.uniform(0.0, 0.1))
    noise_seed = int(rng.integers(2**31))
    cutout = None
    if rng.random() < 0.5:
        side = float(rng.uniform(0.05, 0.25))
        cutout = (float(rng.uniform(0, 1 - side)), float(rng.uniform(0, 1 - side)), side)
    return StrongAug(base, brightness, contrast, sigma, noise_seed, cutout)


# ---------------------------------------------------------------------------
# resampling

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (n_out, n_in)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(a: np.ndarray, size: int) -> np.ndarray:
    if a.shape[-1] == size and a.shape[-2] == size:
        return a.copy()
    ry = _interp_matrix(a.shape[-2], size)
    rx = _interp_matrix(a.shape[-1], size)
    return ry @ a @ rx.T


def _resize_labels(labels: np.ndarray, size: int) -> np.ndarray:
    """Resize a ternary map without inventing labels.

    Upscaling replicates pixels (nearest); downscaling keeps a label if any
    source pixel in the block carries one, foreground taking priority.
    """
    n = labels.shape[0]
    if size == n:
        return labels.copy()
    if size > n:
        if size % n:
            raise ShapeError(f"cannot upscale labels {n} -> {size}")
        f = size // n
        return np.repeat(np.repeat(labels, f, axis=0), f, axis=1)
    if n % size:
        raise ShapeError(f"cannot downscale labels {n} -> {size}")
    f = n // size
    blocks = labels.reshape(size, f, size, f)
    fg = (blocks > 0).any(axis=(1, 3))
    bg = (blocks < 0).any(axis=(1, 3))
    return np.where(fg, 1.0, np.where(bg, -1.0, 0.0))


def _as2d(a: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[:2] != (1, 1):
            raise ShapeError(f"expected 1x1xHxW, got {a.shape}")
        return a[0, 0], a.shape
    if a.ndim != 2:
        raise ShapeError(f"expected HxW or 1x1xHxW, got {a.shape}")
    return a, a.shape


def _restore(a2: np.ndarray, orig_shape) -> np.ndarray:
    return a2[None, None] if len(orig_shape) == 4 else a2


def _geometric(aug: WeakAug, a: np.ndarray, resize) -> np.ndarray:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"augmentation requires square input, got {a.shape}")
    out = a
    if aug.hflip:
        out = out[:, ::-1]
    if aug.vflip:
        out = out[::-1, :]
    if aug.rotation:
        out = np.rot90(out, aug.rotation // 90)
    out = np.ascontiguousarray(out)
    if aug.scale != 1.0:
        out = resize(out, aug.out_size(a.shape[0]))
    return out


def _photometric(aug: StrongAug, a: np.ndarray) -> np.ndarray:
    out = (a - 0.5) * aug.contrast + 0.5 + aug.brightness
    if aug.noise_sigma > 0:
        out = out + np.random.default_rng(aug.noise_seed).normal(0.0, aug.noise_sigma, a.shape)
    if aug.cutout is not None:
        cy, cx, side = aug.cutout
        n = a.shape[0]
        s = max(1, int(round(side * n)))
        y0, x0 = int(cy * n), int(cx * n)
        out[y0:y0 + s, x0:x0 + s] = 0.5
    return np.clip(out, 0.0, 1.0)


def apply(aug: WeakAug | StrongAug, image) -> np.ndarray:
    """Augment an image (HxW or 1x1xHxW, square). Strong augs add photometric changes."""
    a, shape = _as2d(image)
    out = _geometric(aug.geometry, a, resize_bilinear)
    if isinstance(aug, StrongAug):
        out = _photometric(aug, out)
    return _restore(out, shape)


def apply_mask(aug: WeakAug | StrongAug, mask) -> np.ndarray:
    """Move a probability mask into the augmented frame (geometry only)."""
    a, shape = _as2d(mask)
    return _restore(_geometric(aug.geometry, a, resize_bilinear), shape)


def apply_labels(aug: WeakAug | StrongAug, labels: np.ndarray) -> np.ndarray:
    """Move a ternary annotation map into the augmented frame."""
    a, shape = _as2d(labels)
    return _restore(_geometric(aug.geometry, a, _resize_labels), shape)


def invert_to_reference(aug: WeakAug | StrongAug, mask, size: int | None = None) -> np.ndarray:
    """Map a mask predicted at the augmented geometry back to the original frame.

    ``size`` is the reference side length; it defaults to ``mask side / scale``.
    """
    geo = aug.geometry
    a, shape = _as2d(mask)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"mask must be square, got {a.shape}")
    ref = size if size is not None else a.shape[0] / geo.scale
    if ref != int(ref) or geo.out_size(int(ref)) != a.shape[0]:
        raise ShapeError(f"mask side {a.shape[0]} inconsistent with scale {geo.scale}"
                         + (f" and reference side {size}" if size is not None else ""))
    ref = int(ref)
    out = resize_bilinear(a, ref) if geo.scale != 1.0 else a
    if geo.rotation:
        out = np.rot90(out, -(geo.rotation // 90))
    if geo.vflip:
        out = out[::-1, :]
    if geo.hflip:
        out = out[:, ::-1]
    return _restore(np.ascontiguousarray(out), shape)


def with_scale(aug: WeakAug, scale: float) -> WeakAug:
    return replace(aug, scale=scale)
