"""Adversarial texture synthesis on patch tokens.

The generator maps per-token latents through attention blocks to patch
pixels.  The discriminator scores overlapping patches of an image, with an
optional descriptor stream conditioning each block: local mean/variance gaps
against a reference, texton histograms, or nothing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionBlockParams,
    DescriptorPair,
    descriptor_gap,
    embed_patches,
    feed_forward,
    init_attention_block,
    l2_attention,
    layer_norm,
    patch_grid,
    patch_pixels,
    standard_attention,
    texton_attention,
    truncated_normal,
)
from .descriptors import PatchStats, mth_feature_stack, patch_stats
from .tensor import DomainError, ShapeError, Tensor, zero_grads

DESCRIPTOR_MODES = ("musigma", "texton", "none")
GENERATOR_LOSSES = ("nonsaturating", "minimax")
LATENT_DISTRIBUTIONS = ("uniform", "normal")

LOSS_EPS = 1e-7
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid run settings; .violations lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NumericalError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass
class TrainRunConfig:
    """Settings for one training run.  Defaults give the 32x32 desk-scale setup."""

    resolution: int = 32
    patch_size: int = 4
    overlap: int = 2
    blocks: int = 1
    feature_dim: int = 384
    hidden_dim: int = 1536
    heads: int = 4
    latent_dim: int = 32
    latent_dist: str = "uniform"
    descriptor: str = "musigma"
    gen_loss: str = "nonsaturating"
    lr: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    steps: int = 500
    seed: int = 0
    eval_every: int = 10
    eval_samples: int = 4
    l2_negative: bool = True
    l2_tied: bool = True
    sobel_threshold: float = 0.05
    texton_count_mode: str = "per_texton"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        problems = [f"unknown setting: {k}" for k in sorted(set(data) - known)]
        cfg = cls(**{k: v for k, v in data.items() if k in known})
        problems.extend(cfg.violations())
        if problems:
            raise ConfigError(problems)
        return cfg

    def violations(self):
        bad_type = set()
        problems = []

        def check_type(name, kinds, label):
            value = getattr(self, name)
            # bool passes isinstance(int) checks, so reject it explicitly
            if isinstance(value, bool) and bool not in kinds:
                ok = False
            else:
                ok = isinstance(value, kinds)
            if not ok:
                bad_type.add(name)
                problems.append(f"{name} must be {label}, got {value!r}")

        for name in ("resolution", "patch_size", "overlap", "blocks", "feature_dim",
                     "hidden_dim", "heads", "latent_dim", "steps", "seed",
                     "eval_every", "eval_samples"):
            check_type(name, (int,), "an integer")
        for name in ("lr", "beta1", "beta2", "sobel_threshold"):
            check_type(name, (int, float), "a number")
        for name in ("latent_dist", "descriptor", "gen_loss", "texton_count_mode"):
            check_type(name, (str,), "a string")
        for name in ("l2_negative", "l2_tied"):
            check_type(name, (bool,), "a boolean")

        def ok(*names):
            return not any(n in bad_type for n in names)

        if ok("resolution", "patch_size"):
            if self.patch_size < 1:
                problems.append(f"patch_size must be positive, got {self.patch_size}")
            elif self.resolution < self.patch_size or self.resolution % self.patch_size:
                problems.append(
                    f"resolution must be a positive multiple of patch_size,"
                    f" got resolution {self.resolution} with patch {self.patch_size}"
                )
        if ok("overlap", "patch_size") and not 0 <= self.overlap < self.patch_size:
            problems.append(
                f"patch overlap must be < patch size, got overlap"
                f" {self.overlap} with patch {self.patch_size}"
            )
        if ok("feature_dim", "heads"):
            if self.heads < 1:
                problems.append(f"heads must be positive, got {self.heads}")
            elif self.feature_dim < 1 or self.feature_dim % self.heads:
                problems.append(
                    f"feature_dim must be a positive multiple of heads,"
                    f" got {self.feature_dim} with {self.heads} heads"
                )
        for name in ("blocks", "hidden_dim", "latent_dim", "eval_every"):
            if ok(name) and getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if ok("steps") and self.steps < 0:
            problems.append(f"steps must be non-negative, got {self.steps}")
        if ok("eval_samples") and self.eval_samples < 2:
            problems.append(f"eval_samples must be at least 2, got {self.eval_samples}")
        if ok("lr") and not self.lr > 0:
            problems.append(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            if ok(name) and not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if ok("sobel_threshold") and self.sobel_threshold < 0:
            problems.append(f"sobel_threshold must be non-negative, got {self.sobel_threshold}")
        if ok("latent_dist") and self.latent_dist not in LATENT_DISTRIBUTIONS:
            problems.append(
                f"latent_dist must be one of {LATENT_DISTRIBUTIONS}, got {self.latent_dist!r}"
            )
        if ok("descriptor") and self.descriptor not in DESCRIPTOR_MODES:
            problems.append(
                f"descriptor must be one of {DESCRIPTOR_MODES}, got {self.descriptor!r}"
            )
        if ok("gen_loss") and self.gen_loss not in GENERATOR_LOSSES:
            problems.append(
                f"gen_loss must be one of {GENERATOR_LOSSES}, got {self.gen_loss!r}"
            )
        if ok("texton_count_mode") and self.texton_count_mode not in ("per_texton", "per_window"):
            problems.append(
                f"texton_count_mode must be 'per_texton' or 'per_window',"
                f" got {self.texton_count_mode!r}"
            )
        if (ok("descriptor", "patch_size") and self.descriptor == "texton"
                and self.patch_size < 4):
            problems.append(
                f"texton descriptors need patch_size of at least 4, got {self.patch_size}"
            )
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def token_grid(self):
        side = self.resolution // self.patch_size
        return (side, side)


# ---------------------------------------------------------------------------
# model states


@dataclass
class GeneratorState:
    in_proj: Tensor
    pos_table: Tensor
    blocks: list
    final_gain: Tensor
    final_bias: Tensor
    out_proj: Tensor
    base: tuple
    patch: int
    channels: int

    def parameters(self):
        named = {
            "in_proj": self.in_proj,
            "pos": self.pos_table,
            "final_gain": self.final_gain,
            "final_bias": self.final_bias,
            "out_proj": self.out_proj,
        }
        for i, block in enumerate(self.blocks):
            named.update(block.parameters(f"block{i}."))
        return named


@dataclass
class DiscriminatorState:
    embed_proj: Tensor
    pos_table: Tensor
    blocks: list
    final_gain: Tensor
    final_bias: Tensor
    head: Tensor
    base: tuple
    patch: int
    channels: int
    descriptor: str
    gap_proj: Tensor | None = None
    feature_proj: Tensor | None = None

    def parameters(self):
        named = {
            "embed_proj": self.embed_proj,
            "pos": self.pos_table,
            "final_gain": self.final_gain,
            "final_bias": self.final_bias,
            "head": self.head,
        }
        if self.gap_proj is not None:
            named["gap_proj"] = self.gap_proj
        if self.feature_proj is not None:
            named["feature_proj"] = self.feature_proj
        for i, block in enumerate(self.blocks):
            named.update(block.parameters(f"block{i}."))
        return named


def _param(rng, shape, std=0.02):
    return Tensor(truncated_normal(rng, shape, std=std), requires_grad=True)


def init_generator(rng, config, channels):
    dim = config.feature_dim
    p = config.patch_size
    base = config.token_grid()
    return GeneratorState(
        in_proj=_param(rng, (config.latent_dim, dim)),
        pos_table=Tensor(np.zeros((base[0] * base[1], dim)), requires_grad=True),
        blocks=[init_attention_block(rng, dim, config.heads, config.hidden_dim)
                for _ in range(config.blocks)],
        final_gain=Tensor(np.ones(dim), requires_grad=True),
        final_bias=Tensor(np.zeros(dim), requires_grad=True),
        out_proj=_param(rng, (dim, p * p * channels)),
        base=base,
        patch=p,
        channels=channels,
    )


def init_discriminator(rng, config, channels):
    dim = config.feature_dim
    p = config.patch_size
    base = config.token_grid()
    gap_proj = _param(rng, (p * p, dim)) if config.descriptor == "musigma" else None
    feature_proj = _param(rng, (82, dim)) if config.descriptor == "texton" else None
    return DiscriminatorState(
        embed_proj=_param(rng, (p * p * channels, dim)),
        pos_table=Tensor(np.zeros((base[0] * base[1], dim)), requires_grad=True),
        blocks=[init_attention_block(rng, dim, config.heads, config.hidden_dim)
                for _ in range(config.blocks)],
        final_gain=Tensor(np.ones(dim), requires_grad=True),
        final_bias=Tensor(np.zeros(dim), requires_grad=True),
        head=_param(rng, (dim, 1)),
        base=base,
        patch=p,
        channels=channels,
        descriptor=config.descriptor,
        gap_proj=gap_proj,
        feature_proj=feature_proj,
    )


def tiled_positions(table, base, grid):
    """Positional rows for any grid, wrapping the base table periodically."""
    bh, bw = base
    rows = np.arange(grid[0]) % bh
    cols = np.arange(grid[1]) % bw
    flat = (rows[:, None] * bw + cols[None, :]).reshape(-1)
    return table[flat]


def sample_latents(rng, count, config):
    if config.latent_dist == "normal":
        z = rng.normal(0.0, 1.0, (count, config.latent_dim))
    else:
        z = rng.uniform(-1.0, 1.0, (count, config.latent_dim))
    return Tensor(z)


# ---------------------------------------------------------------------------
# forward passes


def generate(gen, latents, grid=None):
    """Map per-token latents to an image of shape (gh*p, gw*p, channels)."""
    if grid is None:
        grid = gen.base
    gh, gw = grid
    if not isinstance(latents, Tensor):
        latents = Tensor(latents)
    want = (gh * gw, gen.in_proj.shape[0])
    if latents.shape != want:
        raise ShapeError(f"latents must have shape {want} for grid {grid},"
                         f" got {latents.shape}")
    x = latents @ gen.in_proj + tiled_positions(gen.pos_table, gen.base, grid)
    for block in gen.blocks:
        x = x + standard_attention(layer_norm(x, block.ln1_gain, block.ln1_bias), block)
        x = x + feed_forward(layer_norm(x, block.ln2_gain, block.ln2_bias), block)
    x = layer_norm(x, gen.final_gain, gen.final_bias)
    pixels = (x @ gen.out_proj).sigmoid()
    p, c = gen.patch, gen.channels
    return (pixels.reshape((gh, gw, p, p, c))
            .transpose((0, 2, 1, 3, 4))
            .reshape((gh * p, gw * p, c)))


def _gray_patch_stats(image, patch, overlap):
    pixels = patch_pixels(image, patch, overlap)
    return patch_stats(pixels.mean(axis=3))


def reference_stats(image, patch, overlap):
    """Mean/variance maps of an image's patches, detached for use as a target."""
    stats = _gray_patch_stats(Tensor(np.asarray(image, dtype=np.float64)), patch, overlap)
    return PatchStats(mean_map=stats.mean_map.detach(), var_map=stats.var_map.detach())


def discriminate(disc, image, config, reference=None, weights_sink=None):
    """Per-patch realness probabilities on a (grid_h, grid_w) map."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=np.float64))
    if image.ndim != 3 or image.shape[2] != disc.channels:
        raise ShapeError(f"expected an (H, W, {disc.channels}) image, got {image.shape}")
    grid = patch_grid(image.shape[0], image.shape[1], disc.patch, config.overlap)
    pos = tiled_positions(disc.pos_table, disc.base, grid)
    seq = embed_patches(image, disc.patch, config.overlap, disc.embed_proj, positions=pos)
    x = seq.tokens

    gap_tokens = None
    texton_feats = None
    if disc.descriptor == "musigma":
        if reference is None:
            raise ValueError("musigma discrimination needs reference patch stats")
        stats = _gray_patch_stats(image, disc.patch, config.overlap)
        pair = DescriptorPair(real=reference, generated=stats)
        gap_tokens = descriptor_gap(pair, disc.gap_proj)
    elif disc.descriptor == "texton":
        # histogram features are counts; no gradient flows through them
        pixels = patch_pixels(image, disc.patch, config.overlap).data
        texton_feats = Tensor(mth_feature_stack(
            pixels, threshold=config.sobel_threshold,
            count_mode=config.texton_count_mode))

    for block in disc.blocks:
        if gap_tokens is not None:
            z = l2_attention(gap_tokens, block, negative=config.l2_negative,
                             tied=config.l2_tied, weights_sink=weights_sink)
        elif texton_feats is not None:
            z = texton_attention(texton_feats, disc.feature_proj, block,
                                 weights_sink=weights_sink)
        else:
            z = standard_attention(layer_norm(x, block.ln1_gain, block.ln1_bias),
                                   block, weights_sink=weights_sink)
        x = x + z
        x = x + feed_forward(layer_norm(x, block.ln2_gain, block.ln2_bias), block)
    x = layer_norm(x, disc.final_gain, disc.final_bias)
    return (x @ disc.head).sigmoid().reshape(grid)


def sgan_loss(d_real, d_fake, gen_loss="nonsaturating"):
    """Discriminator and generator losses from realness probability maps."""
    if gen_loss not in GENERATOR_LOSSES:
        raise ConfigError([f"gen_loss must be one of {GENERATOR_LOSSES}, got {gen_loss!r}"])
    real_term = d_real.clamp_min(LOSS_EPS).log().mean()
    fake_term = (1.0 - d_fake).clamp_min(LOSS_EPS).log().mean()
    loss_d = -(real_term + fake_term)
    if gen_loss == "minimax":
        loss_g = (1.0 - d_fake).clamp_min(LOSS_EPS).log().mean()
    else:
        loss_g = -(d_fake.clamp_min(LOSS_EPS).log().mean())
    return loss_d, loss_g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step_count: int = 0


def init_adam(params):
    return AdamState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def adam_step(params, state, lr, beta1, beta2, eps=1e-8):
    state.step_count += 1
    c1 = 1.0 - beta1 ** state.step_count
    c2 = 1.0 - beta2 ** state.step_count
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        step = lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + eps)
        p.data = p.data - step


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    generator: GeneratorState
    discriminator: DiscriminatorState
    gen_opt: AdamState
    disc_opt: AdamState
    rows: list
    config: TrainRunConfig
    step: int
    rng_train: np.random.Generator = field(default=None, repr=False)
    rng_eval: np.random.Generator = field(default=None, repr=False)


def _check_exemplar(exemplar, config):
    if exemplar.ndim != 3 or exemplar.shape[2] not in (1, 3):
        raise ShapeError(f"exemplar must be (H, W, C) with 1 or 3 channels,"
                         f" got {exemplar.shape}")
    if exemplar.shape[0] < config.resolution or exemplar.shape[1] < config.resolution:
        raise ShapeError(f"exemplar {exemplar.shape[:2]} is smaller than the"
                         f" training resolution {config.resolution}")
    if not np.all((exemplar >= 0.0) & (exemplar <= 1.0)):
        raise DomainError("exemplar pixel values must lie in [0, 1]")


def random_crop(image, size, rng):
    top = int(rng.integers(0, image.shape[0] - size + 1))
    left = int(rng.integers(0, image.shape[1] - size + 1))
    return image[top:top + size, left:left + size].copy()


def train(exemplar, config, resume=None, on_row=None):
    """Run the adversarial loop, returning states and per-step metric rows."""
    config.validate()
    exemplar = np.asarray(exemplar, dtype=np.float64)
    _check_exemplar(exemplar, config)
    channels = exemplar.shape[2]

    if resume is None:
        init_ss, train_ss, eval_ss = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.default_rng(init_ss)
        rng_train = np.random.default_rng(train_ss)
        rng_eval = np.random.default_rng(eval_ss)
        gen = init_generator(init_rng, config, channels)
        disc = init_discriminator(init_rng, config, channels)
        gen_opt = init_adam(gen.parameters())
        disc_opt = init_adam(disc.parameters())
        start = 0
    else:
        mismatched = [
            f.name for f in dataclasses.fields(TrainRunConfig)
            if f.name != "steps"
            and getattr(resume.config, f.name) != getattr(config, f.name)
        ]
        if mismatched:
            raise ConfigError([f"checkpoint disagrees on {name}" for name in mismatched])
        if resume.generator.channels != channels:
            raise ShapeError(f"checkpoint was trained on {resume.generator.channels}"
                             f"-channel images, exemplar has {channels}")
        gen, disc = resume.generator, resume.discriminator
        gen_opt, disc_opt = resume.gen_opt, resume.disc_opt
        rng_train, rng_eval = resume.rng_train, resume.rng_eval
        start = resume.step

    gen_params = gen.parameters()
    disc_params = disc.parameters()
    n_tokens = gen.base[0] * gen.base[1]
    rows = []

    for step in range(start + 1, config.steps + 1):
        crop = random_crop(exemplar, config.resolution, rng_train)
        ref = reference_stats(crop, config.patch_size, config.overlap)
        latents = sample_latents(rng_train, n_tokens, config)
        fake = generate(gen, latents)

        d_real = discriminate(disc, crop, config, reference=ref)
        d_fake = discriminate(disc, fake.detach(), config, reference=ref)
        loss_d, _ = sgan_loss(d_real, d_fake, config.gen_loss)
        if not np.isfinite(loss_d.item()):
            raise NumericalError(f"non-finite discriminator loss at step {step}")
        zero_grads(gen_params)
        zero_grads(disc_params)
        loss_d.backward()
        adam_step(disc_params, disc_opt, config.lr, config.beta1, config.beta2)

        d_fake = discriminate(disc, fake, config, reference=ref)
        _, loss_g = sgan_loss(d_real.detach(), d_fake, config.gen_loss)
        if not np.isfinite(loss_g.item()):
            raise NumericalError(f"non-finite generator loss at step {step}")
        zero_grads(gen_params)
        zero_grads(disc_params)
        loss_g.backward()
        adam_step(gen_params, gen_opt, config.lr, config.beta1, config.beta2)

        row = {"step": step, "loss_d": loss_d.item(), "loss_g": loss_g.item(),
               "ssim": None, "dfrechet": None}
        if step % config.eval_every == 0:
            from . import metrics

            report = metrics.evaluate(exemplar, gen, config, rng_eval,
                                      samples=config.eval_samples)
            row["ssim"] = report.ssim_best
            row["dfrechet"] = report.descriptor_frechet
        rows.append(row)
        if on_row is not None:
            on_row(row)

    return TrainResult(generator=gen, discriminator=disc, gen_opt=gen_opt,
                       disc_opt=disc_opt, rows=rows, config=config,
                       step=max(start, config.steps), rng_train=rng_train,
                       rng_eval=rng_eval)


# ---------------------------------------------------------------------------
# metric rows and checkpoints


METRIC_COLUMNS = ("step", "loss_d", "loss_g", "ssim", "dfrechet")


def _fmt(value):
    return "" if value is None else format(float(value), ".12g")


def format_metric_rows(rows):
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            [str(row["step"])] + [_fmt(row[k]) for k in METRIC_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def save_checkpoint(file, result):
    """Write states, optimizer moments, and RNG positions to an npz file."""
    arrays = {}
    for name, p in result.generator.parameters().items():
        arrays[f"g.{name}"] = p.data
    for name, p in result.discriminator.parameters().items():
        arrays[f"d.{name}"] = p.data
    for prefix, opt in (("gm", result.gen_opt), ("dm", result.disc_opt)):
        for name, a in opt.m.items():
            arrays[f"{prefix}.m.{name}"] = a
        for name, a in opt.v.items():
            arrays[f"{prefix}.v.{name}"] = a
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": result.config.to_dict(),
        "channels": result.generator.channels,
        "step": result.step,
        "opt_steps": {"g": result.gen_opt.step_count, "d": result.disc_opt.step_count},
        "shapes": {name: list(a.shape) for name, a in arrays.items()},
        "rng": {
            "train": result.rng_train.bit_generator.state,
            "eval": result.rng_eval.bit_generator.state,
        },
    }
    np.savez(file, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(file):
    """Rebuild a TrainResult usable as the resume argument of train()."""
    with np.load(file) as data:
        meta = json.loads(data["meta"].item())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError([f"unsupported checkpoint version: {meta.get('version')}"])
        arrays = {k: data[k] for k in data.files if k != "meta"}
    config = TrainRunConfig.from_dict(meta["config"])
    channels = int(meta["channels"])
    scaffold_rng = np.random.default_rng(0)
    gen = init_generator(scaffold_rng, config, channels)
    disc = init_discriminator(scaffold_rng, config, channels)
    for state, prefix in ((gen, "g"), (disc, "d")):
        for name, p in state.parameters().items():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise ConfigError([f"checkpoint is missing array {key}"])
            if arrays[key].shape != p.data.shape:
                raise ConfigError([
                    f"checkpoint array {key} has shape {arrays[key].shape},"
                    f" the config implies {p.data.shape}"])
            p.data = np.array(arrays[key], dtype=np.float64)
    gen_opt = init_adam(gen.parameters())
    disc_opt = init_adam(disc.parameters())
    for opt, prefix in ((gen_opt, "gm"), (disc_opt, "dm")):
        for name in opt.m:
            opt.m[name] = np.array(arrays[f"{prefix}.m.{name}"], dtype=np.float64)
            opt.v[name] = np.array(arrays[f"{prefix}.v.{name}"], dtype=np.float64)
    gen_opt.step_count = int(meta["opt_steps"]["g"])
    disc_opt.step_count = int(meta["opt_steps"]["d"])
    rng_train = np.random.default_rng(0)
    rng_train.bit_generator.state = meta["rng"]["train"]
    rng_eval = np.random.default_rng(0)
    rng_eval.bit_generator.state = meta["rng"]["eval"]
    return TrainResult(generator=gen, discriminator=disc, gen_opt=gen_opt,
                       disc_opt=disc_opt, rows=[], config=config,
                       step=int(meta["step"]), rng_train=rng_train,
                       rng_eval=rng_eval)
