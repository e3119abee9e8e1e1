"""Texture descriptors: patch moment maps and multi-texton histograms.

Two families live here. The moment maps (mean_map, variance_map) are built
from tensor ops so gradients can flow through them to a generated image. The
multi-texton histogram path (Sobel orientation bins, color quantization,
texton detection) is discrete counting over quantized values and is not
differentiable; it runs on plain numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DomainError, ShapeError, Tensor

# Largest possible Sobel response on [0, 1] inputs; normalizes magnitudes.
SOBEL_MAGNITUDE_NORM = 4.0 * math.sqrt(2.0)

# 2x2 window corners in row-major order: 0 top-left, 1 top-right,
# 2 bottom-left, 3 bottom-right. Texton types compare, in order:
# top pair, left pair, main diagonal, anti-diagonal.
TEXTON_CORNER_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))
TEXTON_CORNER_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2))

ORIENTATION_BINS = 18
COLOR_BINS = 64
FEATURE_LENGTH = ORIENTATION_BINS + COLOR_BINS


@dataclass
class TextonFeatures:
    """Raw histogram counts plus the combined 82-long feature vector."""

    orientation_hist: np.ndarray  # (18,)
    color_hist: np.ndarray  # (64,)
    combined: np.ndarray  # (82,) = [orientation, color], optionally L1-normalized


@dataclass
class TextonMap:
    """Per 2x2 window: which texton types fired and the four corner values."""

    fires: np.ndarray  # (rows, cols, 4) bool, pair order as TEXTON_CORNER_PAIRS
    corners: np.ndarray  # (rows, cols, 4) int, corner order as TEXTON_CORNER_OFFSETS


@dataclass
class PatchStats:
    """Moment maps for a patch or a stack of patches, same shape as the input."""

    mean_map: Tensor
    var_map: Tensor


def _check_patch(patch: Tensor) -> Tensor:
    if not isinstance(patch, Tensor):
        patch = Tensor(patch)
    if patch.ndim < 2 or patch.shape[-2] < 1 or patch.shape[-1] < 1:
        raise ShapeError(f"patch needs two non-empty trailing axes, got shape {patch.shape}")
    return patch


def mean_map(patch: Tensor) -> Tensor:
    """Outer product of the per-row means and the per-column means.

    Product form, so a constant patch c yields c*c everywhere (the map lives
    in squared-intensity units). Works on a single patch (M, N) or a stack
    with leading batch axes.
    """
    patch = _check_patch(patch)
    row_means = patch.mean(axis=-1, keepdims=True)  # (..., M, 1)
    col_means = patch.mean(axis=-2, keepdims=True)  # (..., 1, N)
    return row_means * col_means


def variance_map(patch: Tensor) -> Tensor:
    """Outer product of per-row and per-column mean squared deviations."""
    patch = _check_patch(patch)
    row_means = patch.mean(axis=-1, keepdims=True)
    col_means = patch.mean(axis=-2, keepdims=True)
    row_dev = (patch - row_means).square().mean(axis=-1, keepdims=True)
    col_dev = (patch - col_means).square().mean(axis=-2, keepdims=True)
    return row_dev * col_dev


def patch_stats(patch: Tensor) -> PatchStats:
    return PatchStats(mean_map=mean_map(patch), var_map=variance_map(patch))


# ---------------------------------------------------------------------------
# Sobel orientation


def sobel_orientation(image, threshold: float = 0.05):
    """Orientation bins and normalized gradient magnitude per pixel.

    Accepts (H, W) or any batch (..., H, W). Borders use edge replication.
    theta = atan2(gy, gx) folded to [0, 180), binned in 10-degree steps;
    pixels whose normalized magnitude falls below ``threshold`` get bin -1.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-2] < 3 or arr.shape[-1] < 3:
        raise ShapeError(f"sobel needs at least 3x3 trailing extents, got shape {arr.shape}")
    pad_width = [(0, 0)] * (arr.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(arr, pad_width, mode="edge")
    nw, n, ne = p[..., :-2, :-2], p[..., :-2, 1:-1], p[..., :-2, 2:]
    w, e = p[..., 1:-1, :-2], p[..., 1:-1, 2:]
    sw, s, se = p[..., 2:, :-2], p[..., 2:, 1:-1], p[..., 2:, 2:]
    gx = (ne + 2.0 * e + se) - (nw + 2.0 * w + sw)
    gy = (sw + 2.0 * s + se) - (nw + 2.0 * n + ne)
    magnitude = np.hypot(gx, gy) / SOBEL_MAGNITUDE_NORM
    theta = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.minimum((theta // 10.0).astype(np.int64), ORIENTATION_BINS - 1)
    bins[magnitude < threshold] = -1
    return bins, magnitude


# ---------------------------------------------------------------------------
# color quantization


def quantize_colors(rgb) -> np.ndarray:
    """Map (..., 3) color values in [0, 255] to a single index in [0, 64)."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ShapeError(f"expected a trailing axis of 3 color components, got shape {arr.shape}")
    if np.any(arr < 0.0) or np.any(arr > 255.0):
        raise DomainError("color components must lie in [0, 255]")
    levels = np.floor_divide(arr, 64.0).astype(np.int64)
    return 16 * levels[..., 0] + 4 * levels[..., 1] + levels[..., 2]


def quantize_color(r, g, b) -> int:
    return int(quantize_colors(np.array([r, g, b], dtype=np.float64)))


# ---------------------------------------------------------------------------
# texton detection


def _pad_even(arr: np.ndarray) -> np.ndarray:
    """Replicate the last row/column so both trailing extents are even."""
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, arr.shape[-2] % 2), (0, arr.shape[-1] % 2)]
    return np.pad(arr, pad, mode="edge") if any(hi for _, hi in pad) else arr


def _corner_planes(arr: np.ndarray) -> list[np.ndarray]:
    # arr has even trailing extents; one plane per corner of each 2x2 window
    return [arr[..., u::2, v::2] for (u, v) in TEXTON_CORNER_OFFSETS]


def _texton_fires(quantized: np.ndarray):
    corners = _corner_planes(quantized)
    fires = np.stack([corners[i] == corners[j] for (i, j) in TEXTON_CORNER_PAIRS], axis=-1)
    return fires, corners


def detect_textons(quantized) -> TextonMap:
    """Texton firings on non-overlapping 2x2 windows of a quantized index map.

    Odd extents are padded by edge replication first. Equality is tested on
    the quantized indices; several types may fire in the same window.
    """
    arr = np.asarray(quantized)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-d index map, got shape {arr.shape}")
    arr = _pad_even(arr.astype(np.int64))
    fires, corners = _texton_fires(arr)
    return TextonMap(fires=fires, corners=np.stack(corners, axis=-1))


# membership of each corner in the pair list, for once-per-window counting
_CORNER_TYPES = tuple(
    tuple(t for t, pair in enumerate(TEXTON_CORNER_PAIRS) if k in pair) for k in range(4)
)


def _mth_histograms(images: np.ndarray, threshold: float, count_mode: str):
    """Batched raw histograms for (n, H, W, C) images with even H, W."""
    n, height, width, channels = images.shape
    rgb = np.rint(images * 255.0).astype(np.int64)
    if channels == 1:
        rgb = np.repeat(rgb, 3, axis=3)
    q = 16 * (rgb[..., 0] // 64) + 4 * (rgb[..., 1] // 64) + (rgb[..., 2] // 64)
    bins, _ = sobel_orientation(images.mean(axis=3), threshold)

    fires, corner_q = _texton_fires(q)
    corner_bins = _corner_planes(bins)
    orientation = np.zeros((n, ORIENTATION_BINS), dtype=np.float64)
    color = np.zeros((n, COLOR_BINS), dtype=np.float64)

    def count(corner: int, mask: np.ndarray) -> None:
        batch_idx = np.nonzero(mask)[0]
        np.add.at(color, (batch_idx, corner_q[corner][mask]), 1.0)
        ob = corner_bins[corner][mask]
        edged = ob >= 0
        np.add.at(orientation, (batch_idx[edged], ob[edged]), 1.0)

    if count_mode == "per_texton":
        for t, (i, j) in enumerate(TEXTON_CORNER_PAIRS):
            count(i, fires[..., t])
            count(j, fires[..., t])
    elif count_mode == "per_window":
        for corner, types in enumerate(_CORNER_TYPES):
            retained = np.zeros(fires.shape[:-1], dtype=bool)
            for t in types:
                retained |= fires[..., t]
            count(corner, retained)
    else:
        raise ValueError(f"unknown count_mode {count_mode!r}")
    return orientation, color


def _check_image_stack(arr: np.ndarray) -> None:
    if arr.shape[-1] not in (1, 3):
        raise ShapeError(f"expected 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[-3] < 4 or arr.shape[-2] < 4:
        raise ShapeError(f"histogram features need at least 4x4 pixels, got shape {arr.shape}")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError("pixel values must lie in [0, 1]")


def _combine(orientation: np.ndarray, color: np.ndarray, normalize: bool) -> np.ndarray:
    combined = np.concatenate([orientation, color], axis=-1)
    if normalize:
        mass = combined.sum(axis=-1, keepdims=True)
        combined = np.divide(combined, mass, out=np.zeros_like(combined), where=mass > 0)
    return combined


def mth_features(
    image, threshold: float = 0.05, normalize: bool = True, count_mode: str = "per_texton"
) -> TextonFeatures:
    """Multi-texton histogram of one (H, W, C) image with pixels in [0, 1].

    Counting is once per firing texton type by default, so a window firing two
    types contributes its retained pixels twice; ``count_mode='per_window'``
    counts each retained pixel once. With ``normalize`` the combined vector is
    L1-normalized (an all-zero histogram stays all-zero).
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) image, got shape {arr.shape}")
    _check_image_stack(arr)
    arr = _pad_even(arr.transpose(2, 0, 1)).transpose(1, 2, 0)
    orientation, color = _mth_histograms(arr[None], threshold, count_mode)
    return TextonFeatures(
        orientation_hist=orientation[0],
        color_hist=color[0],
        combined=_combine(orientation[0], color[0], normalize),
    )


def mth_feature_stack(
    patches, threshold: float = 0.05, normalize: bool = True, count_mode: str = "per_texton"
) -> np.ndarray:
    """Combined 82-long feature vectors for a (n, p, p, C) stack of patches."""
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected an (n, p, p, C) patch stack, got shape {arr.shape}")
    _check_image_stack(arr)
    arr = _pad_even(arr.transpose(0, 3, 1, 2)).transpose(0, 2, 3, 1)
    orientation, color = _mth_histograms(arr, threshold, count_mode)
    return _combine(orientation, color, normalize)
