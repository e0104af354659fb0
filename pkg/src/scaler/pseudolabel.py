"""Pseudo-label generation and the entropy / uncertainty / trust weightings.

All outputs are plain arrays: they act as fixed targets and never carry a
gradient path back into the model that produced them.
"""
from __future__ import annotations

import numpy as np

from . import augment
from .augment import AugPolicy, WeakAug
from .autodiff import LOG_CLAMP, ShapeError
from .models import GENERALIST_ARCH, STUDENT_ARCH, SegmenterArch, generalist_forward, teacher_forward

TRUST_LOW = 0.1
TRUST_HIGH = 0.9


def _mask2d(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim > 2 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ShapeError(f"expected an H x W mask, got shape {np.shape(mask)}")
    return m


def binary_entropy_map(mask) -> np.ndarray:
    """Per-pixel binary entropy in bits, with logs clamped at 1e-12."""
    p = _mask2d(mask)
    q = 1.0 - p
    return -(p * np.log2(np.maximum(p, LOG_CLAMP)) + q * np.log2(np.maximum(q, LOG_CLAMP)))


def entropy(mask) -> float:
    """Mean per-pixel binary entropy (base 2), in [0, 1]."""
    return float(np.clip(binary_entropy_map(mask).mean(), 0.0, 1.0))


def uncertainty(mask) -> np.ndarray:
    """Pixel certainty weight (2p - 1)^2: 0 at p = 0.5, 1 at p in {0, 1}."""
    p = _mask2d(mask)
    return (2.0 * p - 1.0) ** 2


def trust_mask(mask, low: float = TRUST_LOW, high: float = TRUST_HIGH) -> np.ndarray:
    """1 outside the closed interval [low, high], 0 inside it."""
    p = _mask2d(mask)
    return np.where((p >= low) & (p <= high), 0.0, 1.0)


def consensus(student_out, teacher_out) -> np.ndarray:
    s, t = _mask2d(student_out), _mask2d(teacher_out)
    if s.shape != t.shape:
        raise ShapeError(f"consensus inputs differ in shape: {s.shape} vs {t.shape}")
    return (s + t) / 2.0


def teacher_pseudo(teacher, image, weak: WeakAug, arch: SegmenterArch = STUDENT_ARCH,
                   frame: str = "reference") -> np.ndarray:
    """Teacher prediction on the weakly augmented image.

    ``frame="reference"`` maps it back onto the original image grid;
    ``frame="augmented"`` leaves it where the augmentation put it.
    """
    img = _mask2d(image)
    out = teacher_forward(augment.apply(weak, img), teacher, arch)
    if frame == "augmented":
        return out
    if frame != "reference":
        raise ValueError(f"unknown frame {frame!r}")
    return augment.invert_to_reference(weak, out, size=img.shape[0])


def ensemble_fuse(generalist, image, prompt, policy: AugPolicy | None = None,
                  arch: SegmenterArch = GENERALIST_ARCH, augs: list[WeakAug] | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Average of K generalist predictions on augmented copies, each inverse-warped first.

    ``generalist`` is either a ParamSet or any callable
    ``(aug_image, aug_prompt_labels, aug) -> mask in the augmented frame``
    (used for oracles and noise-injection experiments). The prompt map is warped
    together with the image with the label-preserving resampler.
    """
    img = _mask2d(image)
    labels = None if prompt is None else _mask2d(getattr(prompt, "labels", prompt))
    if augs is None:
        policy = policy or AugPolicy()
        rng = rng if rng is not None else np.random.default_rng(policy.seed)
        augs = [augment.sample_weak(rng, policy.scales) for _ in range(policy.K)]
    if not augs:
        raise ValueError("ensemble needs at least one augmentation")
    # running mean: exact when all members agree
    fused = np.zeros_like(img)
    for k, aug in enumerate(augs, start=1):
        x = augment.apply(aug, img)
        p = None if labels is None else augment.apply_labels(aug, labels)
        if callable(generalist):
            pred = generalist(x, p, aug)
        else:
            pred = generalist_forward(x, p, generalist, arch)
        fused += (augment.invert_to_reference(aug, pred, size=img.shape[0]) - fused) / k
    return np.clip(fused, 0.0, 1.0)
