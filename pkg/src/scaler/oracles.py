"""Stand-in generalists built from ground truth, for harness and noise-injection runs.

Each oracle is a callable ``(aug_image, aug_prompt, aug) -> mask`` in the
augmented frame, the protocol :func:`scaler.pseudolabel.ensemble_fuse` accepts.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from . import augment


def equivariant_oracle(mask: np.ndarray):
    """Returns ``mask`` warped by whatever augmentation the image went through."""
    mask = np.asarray(mask, dtype=np.float64)

    def predict(x, prompt, aug):
        return augment.apply_mask(aug, mask)

    return predict


def smooth_mask(gt: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Band-limited version of a binary mask (gaussian blur, reflect padding)."""
    return gaussian_filter(np.asarray(gt, dtype=np.float64), sigma, mode="reflect")


def boundary_band(gt: np.ndarray, width: float = 2.0) -> np.ndarray:
    """Pixels within ``width`` (euclidean) of the other class."""
    g = np.asarray(gt) > 0.5
    d_in = distance_transform_edt(g)
    d_out = distance_transform_edt(~g)
    return np.where(g, d_in, d_out) <= width


def noisy_gt_oracle(gt: np.ndarray, rate: float, rng: np.random.Generator, width: float = 2.0):
    """Ground truth with each boundary-band pixel flipped with probability ``rate``.

    The flips are redrawn on every call, so an ensemble of calls averages to a
    soft label that is uncertain along the object boundary.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    g = (np.asarray(gt) > 0.5).astype(np.float64)
    band = boundary_band(g, width)

    def predict(x, prompt, aug):
        flip = band & (rng.random(g.shape) < rate)
        return augment.apply_mask(aug, np.where(flip, 1.0 - g, g))

    return predict


def noisy_generalist(samples, rate: float = 0.2, seed: int = 0, width: float = 2.0):
    """Trainer oracle factory: sample index -> noisy-GT oracle with its own stream."""

    def factory(idx: int):
        return noisy_gt_oracle(samples[idx].mask, rate, np.random.default_rng([seed, 31, idx]), width)

    return factory
