"""Descriptor oracles: hand-derived values and independent brute-force checks."""

import math
import time

import numpy as np
import pytest

from conftest import check_grads
from texsyn.descriptors import (
    TEXTON_CORNER_PAIRS,
    DomainError,
    ShapeError,
    detect_textons,
    mean_map,
    mth_feature_stack,
    mth_features,
    quantize_color,
    quantize_colors,
    sobel_orientation,
    variance_map,
)
from texsyn.tensor import Tensor

SOBEL_NORM = 4.0 * math.sqrt(2.0)


# ---------------------------------------------------------------------------
# independent oracles (scalar loops, no shared code with the implementation)


def oracle_quantize(r, g, b):
    return 16 * (int(r) // 64) + 4 * (int(g) // 64) + (int(b) // 64)


def oracle_sobel_bins(gray, threshold=0.05):
    h, w = gray.shape
    bins = -np.ones((h, w), dtype=int)
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    gx += kx[di + 1][dj + 1] * gray[ii, jj]
                    gy += ky[di + 1][dj + 1] * gray[ii, jj]
            mag = math.hypot(gx, gy) / SOBEL_NORM
            if mag >= threshold:
                theta = math.degrees(math.atan2(gy, gx)) % 180.0
                bins[i, j] = min(int(theta // 10.0), 17)
    return bins


def oracle_window_fires(a, b, c, d):
    """Texton types firing in one window: top pair, left pair, diagonal, anti-diagonal."""
    return [a == b, a == c, a == d, b == c]


def oracle_mth(image, threshold=0.05, count_mode="per_texton"):
    """Raw (orientation, color) histogram counts, computed with plain loops."""
    image = np.asarray(image, dtype=np.float64)
    h, w, ch = image.shape
    if h % 2:
        image = np.concatenate([image, image[-1:]], axis=0)
    if image.shape[1] % 2:
        image = np.concatenate([image, image[:, -1:]], axis=1)
    h, w, ch = image.shape
    rgb = np.rint(image * 255.0).astype(int)
    if ch == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    q = np.zeros((h, w), dtype=int)
    for i in range(h):
        for j in range(w):
            q[i, j] = oracle_quantize(*rgb[i, j])
    obins = oracle_sobel_bins(image.mean(axis=2), threshold)

    pair_corners = [((0, 0), (0, 1)), ((0, 0), (1, 0)), ((0, 0), (1, 1)), ((0, 1), (1, 0))]
    orient = np.zeros(18)
    color = np.zeros(64)
    for wi in range(0, h, 2):
        for wj in range(0, w, 2):
            vals = {(u, v): q[wi + u, wj + v] for u in (0, 1) for v in (0, 1)}
            hits = []
            for (p1, p2) in pair_corners:
                if vals[p1] == vals[p2]:
                    hits.extend([p1, p2])
            if count_mode == "per_window":
                hits = sorted(set(hits))
            for (u, v) in hits:
                color[q[wi + u, wj + v]] += 1
                ob = obins[wi + u, wj + v]
                if ob >= 0:
                    orient[ob] += 1
    return orient, color


def stripes_image():
    """8x8, vertical stripes two pixels wide, alternating two colors."""
    img = np.zeros((8, 8, 3))
    color_a = np.array([10, 10, 10]) / 255.0
    color_b = np.array([200, 50, 100]) / 255.0
    for j in range(8):
        img[:, j] = color_a if (j // 2) % 2 == 0 else color_b
    return img


# ---------------------------------------------------------------------------
# mean and variance maps


def test_mean_map_alternating_patch():
    out = mean_map(Tensor([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out.data, np.full((2, 2), 0.25))


def test_mean_map_constant_patch_squares_the_value():
    # product form: a constant patch c maps to c*c
    out = mean_map(Tensor(np.full((3, 5), 0.5)))
    np.testing.assert_allclose(out.data, np.full((3, 5), 0.25))


def test_variance_map_alternating_patch():
    out = variance_map(Tensor([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out.data, np.full((2, 2), 0.0625))


def test_variance_map_constant_patch_is_zero():
    out = variance_map(Tensor(np.full((4, 4), 0.7)))
    np.testing.assert_allclose(out.data, np.zeros((4, 4)), atol=0)


def test_maps_transpose_symmetry():
    rng = np.random.default_rng(42)
    for _ in range(25):
        patch = rng.uniform(0, 1, (int(rng.integers(2, 7)), int(rng.integers(2, 7))))
        np.testing.assert_allclose(mean_map(Tensor(patch.T)).data, mean_map(Tensor(patch)).data.T, atol=1e-12)
        np.testing.assert_allclose(
            variance_map(Tensor(patch.T)).data, variance_map(Tensor(patch)).data.T, atol=1e-12
        )


def test_variance_map_nonnegative_random():
    rng = np.random.default_rng(43)
    for _ in range(100):
        patch = rng.uniform(0, 1, (4, 4))
        assert np.all(variance_map(Tensor(patch)).data >= 0)


def test_maps_batched_leading_axis():
    rng = np.random.default_rng(44)
    stack = rng.uniform(0, 1, (6, 4, 4))
    batched = mean_map(Tensor(stack)).data
    for k in range(6):
        np.testing.assert_allclose(batched[k], mean_map(Tensor(stack[k])).data, atol=1e-12)
    batched_var = variance_map(Tensor(stack)).data
    for k in range(6):
        np.testing.assert_allclose(batched_var[k], variance_map(Tensor(stack[k])).data, atol=1e-12)


def test_maps_gradients_match_finite_differences():
    rng = np.random.default_rng(45)
    patch = rng.uniform(0.1, 0.9, (4, 5))
    w1 = Tensor(rng.uniform(-1, 1, (4, 5)))
    w2 = Tensor(rng.uniform(-1, 1, (4, 5)))
    check_grads(lambda p, w=w1: (mean_map(p) * w).sum(), [patch])
    check_grads(lambda p, w=w2: (variance_map(p) * w).sum(), [patch])


def test_mean_map_rejects_empty():
    with pytest.raises(ShapeError):
        mean_map(Tensor(np.zeros((0, 3))))


# ---------------------------------------------------------------------------
# Sobel orientation


def test_sobel_vertical_step_edge_bin_zero():
    img = np.zeros((6, 6))
    img[:, 3:] = 1.0
    bins, mag = sobel_orientation(img)
    # the two columns flanking the step see the full gradient
    assert np.all(bins[:, 2] == 0) and np.all(bins[:, 3] == 0)
    np.testing.assert_allclose(mag[:, 2], 4.0 / SOBEL_NORM)
    # far columns are flat: no edge
    assert np.all(bins[:, 0] == -1) and np.all(bins[:, 5] == -1)


def test_sobel_horizontal_step_edge_bin_nine():
    img = np.zeros((6, 6))
    img[3:, :] = 1.0
    bins, _ = sobel_orientation(img)
    assert np.all(bins[2, :] == 9) and np.all(bins[3, :] == 9)


def test_sobel_diagonal_ramp_bin_four():
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    img = (i + j) / 14.0
    bins, _ = sobel_orientation(img)
    assert np.all(bins[2:6, 2:6] == 4)  # 45 degrees


def test_sobel_uniform_image_all_no_edge():
    bins, mag = sobel_orientation(np.full((5, 7), 0.3))
    assert np.all(bins == -1)
    np.testing.assert_allclose(mag, 0.0, atol=0)


def test_sobel_matches_bruteforce_random():
    rng = np.random.default_rng(46)
    for _ in range(10):
        img = rng.uniform(0, 1, (int(rng.integers(3, 9)), int(rng.integers(3, 9))))
        bins, _ = sobel_orientation(img)
        np.testing.assert_array_equal(bins, oracle_sobel_bins(img))


def test_sobel_rejects_tiny_images():
    with pytest.raises(ShapeError):
        sobel_orientation(np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# color quantization


def test_quantize_known_color():
    assert quantize_color(70, 130, 200) == 27


def test_quantize_level_boundaries():
    assert quantize_color(0, 0, 0) == 0
    assert quantize_color(63, 63, 63) == 0
    assert quantize_color(64, 64, 64) == 21
    assert quantize_color(255, 255, 255) == 63
    assert quantize_color(191, 128, 63) == 16 * 2 + 4 * 2 + 0


def test_quantize_vector_agrees_with_scalar():
    rng = np.random.default_rng(47)
    rgb = rng.integers(0, 256, (50, 3))
    got = quantize_colors(rgb)
    want = [oracle_quantize(*row) for row in rgb]
    np.testing.assert_array_equal(got, want)


def test_quantize_rejects_out_of_range():
    with pytest.raises(DomainError):
        quantize_color(-1, 0, 0)
    with pytest.raises(DomainError):
        quantize_color(0, 256, 0)
    with pytest.raises(DomainError):
        quantize_colors(np.array([[0, 0, 300]]))


# ---------------------------------------------------------------------------
# texton detection


def test_texton_single_window_top_pair():
    tmap = detect_textons(np.array([[5, 5], [3, 7]]))
    assert tmap.fires.shape == (1, 1, 4)
    assert tmap.fires[0, 0].tolist() == [True, False, False, False]


def test_texton_single_window_all_equal():
    tmap = detect_textons(np.full((2, 2), 9))
    assert tmap.fires[0, 0].tolist() == [True, True, True, True]


def test_texton_single_window_all_distinct():
    tmap = detect_textons(np.array([[0, 1], [2, 3]]))
    assert not tmap.fires[0, 0].any()


def test_texton_corner_order_is_row_major():
    tmap = detect_textons(np.array([[0, 1], [2, 3]]))
    assert tmap.corners[0, 0].tolist() == [0, 1, 2, 3]


def test_texton_exhaustive_256_windows():
    # every 2x2 window over a 4-value alphabet, against the scalar oracle
    for code in range(256):
        a, b, c, d = (code >> 6) & 3, (code >> 4) & 3, (code >> 2) & 3, code & 3
        tmap = detect_textons(np.array([[a, b], [c, d]]))
        assert tmap.fires[0, 0].tolist() == oracle_window_fires(a, b, c, d), (a, b, c, d)


def test_texton_binary_sweep_65536():
    # all 2^16 binary 4x4 maps, tiled into one big map so the window grid of
    # the big map is exactly the union of the per-map windows
    started = time.monotonic()
    codes = np.arange(65536, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(16)) & 1  # (65536, 16)
    maps = bits.reshape(256, 256, 4, 4)
    big = maps.transpose(0, 2, 1, 3).reshape(256 * 4, 256 * 4)
    fires = detect_textons(big).fires  # (512, 512, 4)

    # independent check: corner planes pulled out with plain slicing
    a = big[0::2, 0::2]
    b = big[0::2, 1::2]
    c = big[1::2, 0::2]
    d = big[1::2, 1::2]
    expect = np.stack([a == b, a == c, a == d, b == c], axis=-1)
    np.testing.assert_array_equal(fires, expect)
    assert time.monotonic() - started < 1.0


def test_texton_odd_map_padded_by_replication():
    tmap = detect_textons(np.array([[1, 1, 2], [3, 1, 2], [3, 3, 5]]))
    assert tmap.fires.shape == (2, 2, 4)
    # bottom-right window replicates its last row/column: [[5,5],[5,5]]
    assert tmap.fires[1, 1].tolist() == [True, True, True, True]


def test_texton_pair_constant_matches_oracle_order():
    assert TEXTON_CORNER_PAIRS == ((0, 1), (0, 2), (0, 3), (1, 2))


# ---------------------------------------------------------------------------
# multi-texton histogram


def test_mth_stripes_frozen_counts():
    feats = mth_features(stripes_image(), normalize=False)
    assert feats.orientation_hist[0] == 96
    assert feats.orientation_hist[1:].sum() == 0
    assert feats.color_hist[0] == 64
    assert feats.color_hist[49] == 64
    assert feats.color_hist.sum() == 128
    np.testing.assert_array_equal(feats.combined, np.concatenate([feats.orientation_hist, feats.color_hist]))


def test_mth_stripes_once_per_window_counts():
    feats = mth_features(stripes_image(), normalize=False, count_mode="per_window")
    assert feats.orientation_hist[0] == 48
    assert feats.color_hist[0] == 32
    assert feats.color_hist[49] == 32


def test_mth_matches_bruteforce_random():
    rng = np.random.default_rng(48)
    for mode in ("per_texton", "per_window"):
        for _ in range(6):
            # coarse palette so texton pairs actually fire
            img = rng.integers(0, 4, (6, 8, 3)) * 64 / 255.0
            feats = mth_features(img, normalize=False, count_mode=mode)
            orient, color = oracle_mth(img, count_mode=mode)
            np.testing.assert_array_equal(feats.orientation_hist, orient)
            np.testing.assert_array_equal(feats.color_hist, color)


def test_mth_gray_images_match_oracle():
    rng = np.random.default_rng(49)
    img = rng.integers(0, 4, (4, 4, 1)) * 0.25
    feats = mth_features(img, normalize=False)
    orient, color = oracle_mth(img)
    np.testing.assert_array_equal(feats.orientation_hist, orient)
    np.testing.assert_array_equal(feats.color_hist, color)


def test_mth_no_textons_yields_zero_vector():
    # quantized values distinct inside every window: nothing fires
    tile = np.array([[0, 64], [128, 192]]) / 255.0
    img = np.tile(tile, (2, 2))[:, :, None]
    feats = mth_features(img)
    np.testing.assert_array_equal(feats.combined, np.zeros(82))


def test_mth_normalized_sums_to_one():
    rng = np.random.default_rng(50)
    for _ in range(10):
        img = rng.integers(0, 4, (6, 6, 3)) * 64 / 255.0
        feats = mth_features(img, normalize=True)
        if feats.color_hist.sum() + feats.orientation_hist.sum() > 0:
            assert abs(feats.combined.sum() - 1.0) < 1e-9


def test_mth_feature_stack_matches_single_calls():
    rng = np.random.default_rng(51)
    patches = rng.integers(0, 4, (5, 4, 4, 3)) * 64 / 255.0
    stack = mth_feature_stack(patches, normalize=False)
    assert stack.shape == (5, 82)
    for k in range(5):
        np.testing.assert_array_equal(stack[k], mth_features(patches[k], normalize=False).combined)


def test_sobel_bin_map_180_rotation_invariant():
    # Sobel gradients negate under 180-degree rotation and theta folds mod 180,
    # so the bin map of the rotated image is the reversed bin map. The full MTH
    # vector is NOT 180-invariant (the top/left texton pairs are not
    # 180-stable); see the diagonal-type test below for the part that is.
    rng = np.random.default_rng(52)
    for _ in range(10):
        img = rng.uniform(0, 1, (7, 6))
        bins, mag = sobel_orientation(img)
        rbins, rmag = sobel_orientation(img[::-1, ::-1].copy())
        np.testing.assert_array_equal(rbins, bins[::-1, ::-1])
        np.testing.assert_allclose(rmag, mag[::-1, ::-1], atol=1e-12)


def test_texton_diagonal_types_180_rotation_stable():
    # the two diagonal pair types survive 180-degree rotation window-for-window
    rng = np.random.default_rng(53)
    for _ in range(10):
        q = rng.integers(0, 4, (8, 8))
        rot = q[::-1, ::-1].copy()
        f = detect_textons(q).fires
        g = detect_textons(rot).fires
        np.testing.assert_array_equal(g[::-1, ::-1, 2], f[..., 2])
        np.testing.assert_array_equal(g[::-1, ::-1, 3], f[..., 3])


def test_mth_rejects_small_images():
    with pytest.raises(ShapeError):
        mth_features(np.zeros((3, 8, 3)))


def test_mth_rejects_out_of_range_pixels():
    with pytest.raises(DomainError):
        mth_features(np.full((4, 4, 3), 1.5))
