"""Patch embedding and the three attention variants of the texture model.

All variants share the multi-head skeleton: per-head projections, a score
matrix scaled by 1/sqrt(head_dim), row softmax, weighted sum of values, head
concatenation, output projection. They differ in where the tokens come from
and how scores are formed:

- standard_attention: scaled dot-product scores on its input tokens.
- l2_attention: scores are squared L2 distances between projected rows,
  negated by default so that similar rows attend to each other. The query and
  key projections are tied by default.
- texton_attention: input is an (n, 82) histogram-feature matrix, linearly
  projected to the token width, then scored like standard attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .descriptors import FEATURE_LENGTH, PatchStats
from .tensor import ShapeError, Tensor, concat


@dataclass
class PatchSequence:
    """Embedded patch tokens plus the grid they came from."""

    tokens: Tensor  # (n, dim)
    grid: tuple[int, int]  # (rows, cols), n == rows * cols
    overlap: int


@dataclass
class DescriptorPair:
    """Moment statistics of a real reference and of the image under test."""

    real: PatchStats
    generated: PatchStats


@dataclass
class AttentionBlockParams:
    """Weights for one transformer block.

    The feed-forward and layer-norm fields are optional so that bare attention
    calls can be made with hand-built projections in tests and tools.
    """

    heads: int
    head_dim: int
    w_query: list[Tensor]
    w_key: list[Tensor]
    w_value: list[Tensor]
    out_proj: Tensor
    ffn_w1: Tensor | None = None
    ffn_b1: Tensor | None = None
    ffn_w2: Tensor | None = None
    ffn_b2: Tensor | None = None
    ln1_gain: Tensor | None = None
    ln1_bias: Tensor | None = None
    ln2_gain: Tensor | None = None
    ln2_bias: Tensor | None = None

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for h in range(self.heads):
            out[f"{prefix}wq{h}"] = self.w_query[h]
            out[f"{prefix}wk{h}"] = self.w_key[h]
            out[f"{prefix}wv{h}"] = self.w_value[h]
        out[f"{prefix}out_proj"] = self.out_proj
        for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                     "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            value = getattr(self, name)
            if value is not None:
                out[f"{prefix}{name}"] = value
        return out


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they land within two deviations."""
    out = rng.normal(0.0, std, shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std)


def init_attention_block(
    rng: np.random.Generator, dim: int, heads: int, hidden: int, std: float = 0.02
) -> AttentionBlockParams:
    if dim % heads != 0:
        raise ShapeError(f"token dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    mat = lambda *shape: Tensor(truncated_normal(rng, shape, std), requires_grad=True)
    return AttentionBlockParams(
        heads=heads,
        head_dim=head_dim,
        w_query=[mat(dim, head_dim) for _ in range(heads)],
        w_key=[mat(dim, head_dim) for _ in range(heads)],
        w_value=[mat(dim, head_dim) for _ in range(heads)],
        out_proj=mat(dim, dim),
        ffn_w1=mat(dim, hidden),
        ffn_b1=Tensor(np.zeros(hidden), requires_grad=True),
        ffn_w2=mat(hidden, dim),
        ffn_b2=Tensor(np.zeros(dim), requires_grad=True),
        ln1_gain=Tensor(np.ones(dim), requires_grad=True),
        ln1_bias=Tensor(np.zeros(dim), requires_grad=True),
        ln2_gain=Tensor(np.ones(dim), requires_grad=True),
        ln2_bias=Tensor(np.zeros(dim), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# patch carving


_INDEX_CACHE: dict[tuple[int, int, int, int, int], np.ndarray] = {}


def patch_grid(height: int, width: int, patch: int, overlap: int) -> tuple[int, int]:
    """Window counts per axis; short remainders are covered by replication."""
    if patch < 1:
        raise ShapeError(f"patch size must be positive, got {patch}")
    if not 0 <= overlap < patch:
        raise ShapeError(f"patch overlap must be < patch size, got overlap {overlap} with patch {patch}")
    stride = patch - overlap

    def windows(extent: int) -> int:
        if extent <= patch:
            return 1
        return -(-(extent - patch) // stride) + 1

    return windows(height), windows(width)


def _flat_indices(height: int, width: int, channels: int, patch: int, overlap: int) -> np.ndarray:
    key = (height, width, channels, patch, overlap)
    cached = _INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    rows, cols = patch_grid(height, width, patch, overlap)
    stride = patch - overlap
    rr = np.minimum(np.arange(rows)[:, None] * stride + np.arange(patch)[None, :], height - 1)
    cc = np.minimum(np.arange(cols)[:, None] * stride + np.arange(patch)[None, :], width - 1)
    pixel = rr[:, None, :, None] * width + cc[None, :, None, :]  # (rows, cols, p, p)
    flat = pixel[..., None] * channels + np.arange(channels)
    flat = flat.reshape(rows * cols, patch * patch * channels)
    _INDEX_CACHE[key] = flat
    return flat


def patch_pixels(image: Tensor, patch: int, overlap: int) -> Tensor:
    """Differentiable (n, p, p, C) view of the image's patch windows."""
    if image.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) image, got shape {image.shape}")
    height, width, channels = image.shape
    idx = _flat_indices(height, width, channels, patch, overlap)
    flat = image.reshape((height * width * channels,))[idx]
    return flat.reshape((idx.shape[0], patch, patch, channels))


def embed_patches(
    image: Tensor,
    patch: int,
    overlap: int,
    proj: Tensor,
    positions: Tensor | None = None,
) -> PatchSequence:
    """Flatten overlapping patch windows and project them to token width.

    Stride is patch - overlap; bottom/right remainders are covered by edge
    replication. ``positions`` is a learned (n, dim) table added per grid
    position, or None to embed without positional information.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) image, got shape {image.shape}")
    height, width, channels = image.shape
    grid = patch_grid(height, width, patch, overlap)
    expected = patch * patch * channels
    if proj.shape[0] != expected:
        raise ShapeError(f"patch projection expects {proj.shape[0]} inputs, patches have {expected}")
    idx = _flat_indices(height, width, channels, patch, overlap)
    tokens = image.reshape((height * width * channels,))[idx] @ proj
    if positions is not None:
        if positions.shape != tokens.shape:
            raise ShapeError(f"positional table {positions.shape} does not match tokens {tokens.shape}")
        tokens = tokens + positions
    return PatchSequence(tokens=tokens, grid=grid, overlap=overlap)


# ---------------------------------------------------------------------------
# descriptor gap


def descriptor_gap(pair: DescriptorPair, proj: Tensor | None = None) -> Tensor:
    """Per-patch statistics gap, flattened to one row per patch.

    sqrt(clamp_min((mean_hat - mean)^2 + (var_hat - var), 0)): identical
    statistics give exactly zero rows, and the clamp keeps the sqrt domain
    valid since the variance term enters unsquared. With ``proj`` the rows are
    projected to the attention token width.
    """
    real, generated = pair.real, pair.generated
    if real.mean_map.shape != generated.mean_map.shape or real.var_map.shape != generated.var_map.shape:
        raise ShapeError(
            f"descriptor grids misaligned: real {real.mean_map.shape} vs generated {generated.mean_map.shape}"
        )
    gap = ((generated.mean_map - real.mean_map).square()
           + (generated.var_map - real.var_map)).clamp_min(0.0).sqrt()
    if gap.ndim == 2:
        flat = gap.reshape((1, gap.shape[0] * gap.shape[1]))
    else:
        count = gap.shape[0]
        flat = gap.reshape((count, int(np.prod(gap.shape[1:]))))
    return flat @ proj if proj is not None else flat


# ---------------------------------------------------------------------------
# attention variants


def _coerce_tokens(x, what: str) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-d (tokens by features), got shape {x.shape}")
    return x


def _attend(x: Tensor, params: AttentionBlockParams, dot: bool,
            negative: bool, tied: bool, weights_sink) -> Tensor:
    scale = 1.0 / math.sqrt(params.head_dim)
    heads = []
    for h in range(params.heads):
        wq = params.w_query[h]
        wk = wq if tied else params.w_key[h]
        q = x @ wq  # (n, head_dim)
        k = x @ wk
        v = x @ params.w_value[h]
        if dot:
            scores = (q @ k.transpose()) * scale
        else:
            q_sq = (q * q).sum(axis=1, keepdims=True)  # (n, 1)
            k_sq = (k * k).sum(axis=1, keepdims=True)
            dist_sq = q_sq + k_sq.transpose() - (q @ k.transpose()) * 2.0
            scores = (-dist_sq if negative else dist_sq) * scale
        weights = scores.softmax_rows()
        if weights_sink is not None:
            weights_sink.append({"head": h, "scores": scores.data.copy(), "weights": weights.data.copy()})
        heads.append(weights @ v)
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return merged @ params.out_proj


def standard_attention(x, params: AttentionBlockParams, weights_sink=None) -> Tensor:
    """Scaled dot-product multi-head attention over token rows."""
    return _attend(_coerce_tokens(x, "tokens"), params, dot=True,
                   negative=False, tied=False, weights_sink=weights_sink)


def l2_attention(x, params: AttentionBlockParams, negative: bool = True,
                 tied: bool = True, weights_sink=None) -> Tensor:
    """Attention scored by pairwise squared L2 distance of projected rows.

    ``negative`` scores by -distance (near rows attend to each other), the
    literal positive form stays available for ablation. ``tied`` reuses the
    query projection as the key projection, making the score matrix symmetric.
    """
    return _attend(_coerce_tokens(x, "tokens"), params, dot=False,
                   negative=negative, tied=tied, weights_sink=weights_sink)


def texton_attention(features, feature_proj: Tensor, params: AttentionBlockParams,
                     weights_sink=None) -> Tensor:
    """Dot-product attention over histogram features projected to token width."""
    feats = _coerce_tokens(features, "texton features")
    if feats.shape[1] != FEATURE_LENGTH:
        raise ShapeError(f"texton feature vectors must have length {FEATURE_LENGTH}, got {feats.shape[1]}")
    if feature_proj.shape[0] != FEATURE_LENGTH:
        raise ShapeError(f"feature projection must take {FEATURE_LENGTH} inputs, got {feature_proj.shape}")
    return _attend(feats @ feature_proj, params, dot=True,
                   negative=False, tied=False, weights_sink=weights_sink)


# ---------------------------------------------------------------------------
# block sublayers


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale and shift."""
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = centered.square().mean(axis=-1, keepdims=True)
    return centered / (variance + eps).sqrt() * gain + bias


def feed_forward(x: Tensor, params: AttentionBlockParams) -> Tensor:
    """Two-layer MLP with ReLU, token-wise."""
    hidden = (x @ params.ffn_w1 + params.ffn_b1).clamp_min(0.0)
    return hidden @ params.ffn_w2 + params.ffn_b2
