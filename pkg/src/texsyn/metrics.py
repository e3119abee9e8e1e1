"""Synthesis quality measures: windowed SSIM and descriptor-space Fréchet distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .descriptors import mth_feature_stack
from .tensor import ShapeError

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
COV_REGULARIZER = 1e-6


def _to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=2)
    if image.ndim != 2:
        raise ShapeError(f"expected an (H, W) or (H, W, C) image, got {image.shape}")
    return image


def ssim(image_a, image_b, window=SSIM_WINDOW):
    """Mean structural similarity over all fully-inside sliding windows.

    Uses a uniform window and a dynamic range of 1; identical inputs score
    exactly 1.0.
    """
    a = _to_gray(image_a)
    b = _to_gray(image_b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"images must be at least {window}x{window}, got {a.shape}")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa * wa).mean(axis=(2, 3)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(2, 3)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _sym_sqrt(matrix):
    values, vectors = np.linalg.eigh(matrix)
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_gaussian(mean_a, cov_a, mean_b, cov_b):
    """Squared Fréchet distance between two Gaussians, clamped non-negative."""
    mean_a = np.asarray(mean_a, dtype=np.float64)
    mean_b = np.asarray(mean_b, dtype=np.float64)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mean_a.shape != mean_b.shape or cov_a.shape != cov_b.shape:
        raise ShapeError("mean or covariance shapes differ between the two sides")
    if cov_a.shape != (mean_a.size, mean_a.size):
        raise ShapeError(f"covariance shape {cov_a.shape} does not match"
                         f" mean length {mean_a.size}")
    diff = mean_a - mean_b
    root_b = _sym_sqrt(cov_b)
    cross = _sym_sqrt(root_b @ cov_a @ root_b)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def descriptor_frechet(features_real, features_fake):
    """Fréchet distance between texton-histogram feature clouds.

    Each side needs at least two feature rows; covariances get a small
    diagonal ridge so near-degenerate clouds stay well conditioned.
    """
    real = np.asarray(features_real, dtype=np.float64)
    fake = np.asarray(features_fake, dtype=np.float64)
    for name, side in (("real", real), ("fake", fake)):
        if side.ndim != 2:
            raise ShapeError(f"{name} features must be 2-d, got shape {side.shape}")
        if side.shape[0] < 2:
            raise ShapeError(f"need at least two {name} feature rows, got {side.shape[0]}")
    if real.shape[1] != fake.shape[1]:
        raise ShapeError(f"feature widths differ: {real.shape[1]} vs {fake.shape[1]}")
    ridge = COV_REGULARIZER * np.eye(real.shape[1])
    return frechet_gaussian(
        real.mean(axis=0), np.cov(real, rowvar=False, ddof=1) + ridge,
        fake.mean(axis=0), np.cov(fake, rowvar=False, ddof=1) + ridge,
    )


@dataclass
class MetricReport:
    ssim_best: float
    ssim_all: list
    descriptor_frechet: float
    samples: int


def _center_crop(image, size):
    top = (image.shape[0] - size) // 2
    left = (image.shape[1] - size) // 2
    return image[top:top + size, left:left + size]


def _carve_patches(image, patch):
    h = image.shape[0] // patch * patch
    w = image.shape[1] // patch * patch
    trimmed = image[:h, :w]
    gh, gw = h // patch, w // patch
    c = trimmed.shape[2]
    return (trimmed.reshape(gh, patch, gw, patch, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch, patch, c))


def evaluate(exemplar, generator, config, rng, samples=4):
    """Score a generator against an exemplar.

    Draws `samples` images, reports the best SSIM against a fixed center
    crop, and the Fréchet distance between texton features of real and
    generated patches.
    """
    from . import gan

    exemplar = np.asarray(exemplar, dtype=np.float64)
    reference = _center_crop(exemplar, config.resolution)
    n_tokens = generator.base[0] * generator.base[1]
    metric_patch = max(4, config.patch_size)

    crops = [gan.random_crop(exemplar, config.resolution, rng) for _ in range(samples)]
    images = []
    scores = []
    for _ in range(samples):
        latents = gan.sample_latents(rng, n_tokens, config)
        image = gan.generate(generator, latents).data
        images.append(image)
        scores.append(ssim(image, reference))

    real_feats = np.concatenate([
        mth_feature_stack(_carve_patches(crop, metric_patch),
                          threshold=config.sobel_threshold,
                          count_mode=config.texton_count_mode)
        for crop in crops])
    fake_feats = np.concatenate([
        mth_feature_stack(_carve_patches(image, metric_patch),
                          threshold=config.sobel_threshold,
                          count_mode=config.texton_count_mode)
        for image in images])
    return MetricReport(
        ssim_best=max(scores),
        ssim_all=scores,
        descriptor_frechet=descriptor_frechet(real_feats, fake_feats),
        samples=samples,
    )
