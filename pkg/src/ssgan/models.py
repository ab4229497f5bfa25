"""Generator and dual-head discriminator architectures.

Residual networks sized for 32x32 images with configurable channel widths.
The discriminator is a shared convolutional trunk with two linear heads: a
source head (one real/fake logit) and, for self-supervised variants, a
rotation head (four logits). The conditional baseline adds a label-embedding
projection to the source logit and label-conditional batch norm in the
generator; the self-modulated variant predicts the generator's batch-norm
scale/shift from the latent vector instead.

Spectral normalization is implemented locally so its power-iteration state
is an explicit, serializable part of the model (``weight_u`` / ``weight_v``
buffers) and the estimator can be unit-tested against an SVD oracle.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import ConfigError
from .rotation import NUM_ROTATIONS

SN_EPS = 1e-12

VARIANTS = ("sn_gan", "pcgan", "ssgan", "ssgan_sbn")
REGULARIZERS = ("spectral_norm", "gradient_penalty", "none")


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------


@dataclass
class SpectralNormState:
    """Power-iteration vectors for one weight matrix; u, v stay unit-norm."""

    u: torch.Tensor  # [out_dim]
    v: torch.Tensor  # [in_dim]
    n_power_iterations: int = 1


def _power_iterate(w_mat: torch.Tensor, u: torch.Tensor, n_iters: int):
    for _ in range(n_iters):
        v = F.normalize(w_mat.t().mv(u), dim=0, eps=SN_EPS)
        u = F.normalize(w_mat.mv(v), dim=0, eps=SN_EPS)
    return u, v


def spectral_normalize(
    weight: torch.Tensor, state: SpectralNormState
) -> tuple[torch.Tensor, SpectralNormState]:
    """Divide a 2-D weight by its power-iteration largest-singular-value estimate.

    Runs ``state.n_power_iterations`` update steps (gradient-free), then
    returns ``weight / sigma`` with ``sigma = u^T W v``. Gradients flow
    through both the weight and sigma, matching how the normalized weight
    behaves inside a training graph. A zero weight matrix yields sigma
    floored at a small epsilon instead of dividing by zero.
    """
    if weight.ndim != 2:
        raise ValueError(f"weight must be 2-D (out_dim x in_dim), got shape {tuple(weight.shape)}")
    with torch.no_grad():
        u, v = _power_iterate(weight, state.u, state.n_power_iterations)
    sigma = torch.dot(u, weight.mv(v)).clamp_min(SN_EPS)
    new_state = SpectralNormState(u=u, v=v, n_power_iterations=state.n_power_iterations)
    return weight / sigma, new_state


def init_spectral_state(
    weight: torch.Tensor, generator: torch.Generator | None = None, n_power_iterations: int = 1
) -> SpectralNormState:
    n = weight.shape[1]
    v = F.normalize(torch.randn(n, generator=generator, dtype=weight.dtype), dim=0, eps=SN_EPS)
    u = F.normalize(weight.detach().mv(v), dim=0, eps=SN_EPS)
    return SpectralNormState(u=u, v=v, n_power_iterations=max(1, n_power_iterations))


class _SpectralNormMixin:
    """Adds weight_u/weight_v buffers and a normalized-weight accessor.

    The power iteration advances once per training-mode forward; evaluation
    reuses the stored vectors, so eval outputs are a pure function of the
    parameters.
    """

    def _init_sn(self):
        # u is aligned with W v from the start so sigma = u^T W v = ||W v|| >= 0;
        # a fully random pair can give a negative estimate and blow up the weight
        w_mat = self.weight.detach().reshape(self.weight.shape[0], -1)
        v = F.normalize(torch.randn(w_mat.shape[1]), dim=0, eps=SN_EPS)
        self.register_buffer("weight_v", v)
        self.register_buffer("weight_u", F.normalize(w_mat.mv(v), dim=0, eps=SN_EPS))

    def spectral_weight(self) -> torch.Tensor:
        w_mat = self.weight.reshape(self.weight.shape[0], -1)
        if self.training:
            with torch.no_grad():
                u, v = _power_iterate(w_mat, self.weight_u, 1)
                self.weight_u.copy_(u)
                self.weight_v.copy_(v)
        sigma = torch.dot(self.weight_u, w_mat.mv(self.weight_v)).clamp_min(SN_EPS)
        return self.weight / sigma


class SNConv2d(nn.Conv2d, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn()

    def forward(self, x):
        return self._conv_forward(x, self.spectral_weight(), self.bias)


class SNLinear(nn.Linear, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn()

    def forward(self, x):
        return F.linear(x, self.spectral_weight(), self.bias)


class SNEmbedding(nn.Embedding, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn()

    def forward(self, y):
        return F.embedding(y, self.spectral_weight())


def conv2d(in_ch, out_ch, ksize, use_sn, stride=1, padding=0):
    cls = SNConv2d if use_sn else nn.Conv2d
    return cls(in_ch, out_ch, ksize, stride=stride, padding=padding)


def linear(in_f, out_f, use_sn):
    return (SNLinear if use_sn else nn.Linear)(in_f, out_f)


# ---------------------------------------------------------------------------
# Generator-side conditional normalization
# ---------------------------------------------------------------------------

NORM_MODES = ("plain_bn", "self_modulated_bn", "label_conditional_bn")


class ConditionalBatchNorm(nn.Module):
    """Batch norm whose scale/shift come from nowhere, the latent, or a label.

    Normalization always uses batch statistics (no running averages), so the
    module behaves identically in train and eval mode and a batch of one is
    rejected (its variance is undefined).

    self_modulated_bn: per-channel (gamma, beta) from a one-hidden-layer MLP
    on the latent vector; initialized so gamma == 1, beta == 0, i.e. it
    starts out as plain batch norm.
    label_conditional_bn: per-class (gamma, beta) embedding tables.
    """

    def __init__(self, num_features, mode="plain_bn", z_dim=None, num_classes=None, hidden_dim=32):
        super().__init__()
        if mode not in NORM_MODES:
            raise ConfigError(f"unknown norm mode {mode!r}, expected one of {NORM_MODES}")
        self.num_features = num_features
        self.mode = mode
        if mode == "plain_bn":
            self.gamma = nn.Parameter(torch.ones(num_features))
            self.beta = nn.Parameter(torch.zeros(num_features))
        elif mode == "self_modulated_bn":
            if z_dim is None:
                raise ConfigError("self_modulated_bn requires z_dim")
            self.hidden = nn.Linear(z_dim, hidden_dim)
            self.to_gamma = nn.Linear(hidden_dim, num_features)
            self.to_beta = nn.Linear(hidden_dim, num_features)
            nn.init.zeros_(self.to_gamma.weight)
            nn.init.ones_(self.to_gamma.bias)
            nn.init.zeros_(self.to_beta.weight)
            nn.init.zeros_(self.to_beta.bias)
        else:
            if num_classes is None:
                raise ConfigError("label_conditional_bn requires num_classes")
            self.gamma_embed = nn.Embedding(num_classes, num_features)
            self.beta_embed = nn.Embedding(num_classes, num_features)
            nn.init.ones_(self.gamma_embed.weight)
            nn.init.zeros_(self.beta_embed.weight)

    def forward(self, h, z=None, y=None):
        if h.shape[0] < 2:
            raise ValueError("batch statistics are undefined for batch size 1")
        h = F.batch_norm(h, None, None, None, None, training=True, momentum=0.0, eps=1e-5)
        if self.mode == "plain_bn":
            gamma, beta = self.gamma, self.beta
            return h * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)
        if self.mode == "self_modulated_bn":
            if z is None:
                raise ValueError("self_modulated_bn needs the latent vector z")
            hid = F.relu(self.hidden(z))
            gamma, beta = self.to_gamma(hid), self.to_beta(hid)
        else:
            if y is None:
                raise ValueError("label_conditional_bn needs labels y")
            gamma, beta = self.gamma_embed(y), self.beta_embed(y)
        return h * gamma.unsqueeze(-1).unsqueeze(-1) + beta.unsqueeze(-1).unsqueeze(-1)


def self_modulated_bn(h, z, params: ConditionalBatchNorm):
    """Apply a latent-modulated batch norm module to activations ``h``."""
    if params.mode != "self_modulated_bn":
        raise ConfigError(f"params must be a self_modulated_bn module, got {params.mode}")
    return params(h, z=z)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentSpec:
    """Latent noise specification: standard normal of a fixed dimension."""

    dim: int = 128

    def sample(self, n, generator=None, device=None, dtype=None):
        return torch.randn(n, self.dim, generator=generator, device=device, dtype=dtype)


class GenBlock(nn.Module):
    """Pre-activation residual block with 2x nearest-neighbor upsampling."""

    def __init__(self, in_ch, out_ch, norm_mode, z_dim, num_classes, sbn_hidden):
        super().__init__()
        self.bn1 = ConditionalBatchNorm(in_ch, norm_mode, z_dim, num_classes, sbn_hidden)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn2 = ConditionalBatchNorm(out_ch, norm_mode, z_dim, num_classes, sbn_hidden)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.conv_sc = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, h, z=None, y=None):
        sc = self.conv_sc(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = F.relu(self.bn1(h, z, y))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, z, y)))
        return h + sc


class Generator(nn.Module):
    """ResNet generator mapping latents (and optionally labels) to tanh images."""

    def __init__(
        self,
        image_size=32,
        channels=3,
        gf_dim=256,
        z_dim=128,
        norm_mode="plain_bn",
        num_classes=None,
        sbn_hidden=32,
    ):
        super().__init__()
        if image_size % 8 != 0:
            raise ConfigError(f"image_size must be divisible by 8, got {image_size}")
        self.latent = LatentSpec(z_dim)
        self.norm_mode = norm_mode
        self.num_classes = num_classes
        self.bottom = image_size // 8
        self.gf_dim = gf_dim
        self.fc = nn.Linear(z_dim, gf_dim * self.bottom * self.bottom)
        self.blocks = nn.ModuleList(
            [GenBlock(gf_dim, gf_dim, norm_mode, z_dim, num_classes, sbn_hidden) for _ in range(3)]
        )
        self.bn_out = ConditionalBatchNorm(gf_dim, "plain_bn")
        self.conv_out = nn.Conv2d(gf_dim, channels, 3, padding=1)

    def forward(self, z, y=None):
        if self.norm_mode == "label_conditional_bn" and y is None:
            raise ValueError("label-conditional generator needs labels y")
        h = self.fc(z).reshape(z.shape[0], self.gf_dim, self.bottom, self.bottom)
        for block in self.blocks:
            h = block(h, z, y)
        h = F.relu(self.bn_out(h))
        return torch.tanh(self.conv_out(h))


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------


class DiscOutput(NamedTuple):
    source: torch.Tensor  # [N] real/fake logits
    rotation: torch.Tensor | None  # [N, 4] or None for variants without the head
    trunk: torch.Tensor  # [N, F] pooled trunk features


class OptimizedDiscBlock(nn.Module):
    """First discriminator block: conv-relu-conv-pool with a pooled 1x1 shortcut."""

    def __init__(self, in_ch, out_ch, use_sn):
        super().__init__()
        self.conv1 = conv2d(in_ch, out_ch, 3, use_sn, padding=1)
        self.conv2 = conv2d(out_ch, out_ch, 3, use_sn, padding=1)
        self.conv_sc = conv2d(in_ch, out_ch, 1, use_sn)

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(x)))
        h = F.avg_pool2d(h, 2)
        return h + self.conv_sc(F.avg_pool2d(x, 2))


class DiscBlock(nn.Module):
    """Pre-activation residual block, optionally downsampling by 2."""

    def __init__(self, in_ch, out_ch, use_sn, downsample):
        super().__init__()
        self.downsample = downsample
        self.learn_sc = in_ch != out_ch or downsample
        self.conv1 = conv2d(in_ch, out_ch, 3, use_sn, padding=1)
        self.conv2 = conv2d(out_ch, out_ch, 3, use_sn, padding=1)
        if self.learn_sc:
            self.conv_sc = conv2d(in_ch, out_ch, 1, use_sn)

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        sc = x
        if self.learn_sc:
            sc = self.conv_sc(sc)
        if self.downsample:
            h = F.avg_pool2d(h, 2)
            sc = F.avg_pool2d(sc, 2)
        return h + sc


class Discriminator(nn.Module):
    """Shared ResNet trunk feeding a source head and an optional rotation head.

    Trunk blocks are exposed by name ("block0".."block3") so frozen features
    can be probed; ``block_feature_shapes`` declares their output shapes.
    """

    def __init__(
        self,
        image_size=32,
        channels=3,
        df_dim=128,
        with_rotation_head=True,
        num_classes=None,
        use_sn=True,
    ):
        super().__init__()
        if image_size % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {image_size}")
        self.image_size = image_size
        self.df_dim = df_dim
        self.use_sn = use_sn
        self.blocks = nn.ModuleDict(
            {
                "block0": OptimizedDiscBlock(channels, df_dim, use_sn),
                "block1": DiscBlock(df_dim, df_dim, use_sn, downsample=True),
                "block2": DiscBlock(df_dim, df_dim, use_sn, downsample=False),
                "block3": DiscBlock(df_dim, df_dim, use_sn, downsample=False),
            }
        )
        self.source_head = linear(df_dim, 1, use_sn)
        self.rotation_head = linear(df_dim, NUM_ROTATIONS, use_sn) if with_rotation_head else None
        self.label_embed = None
        if num_classes is not None:
            self.label_embed = (SNEmbedding if use_sn else nn.Embedding)(num_classes, df_dim)

    @property
    def block_names(self):
        return list(self.blocks.keys())

    @property
    def block_feature_shapes(self):
        s = self.image_size
        return {
            "block0": (self.df_dim, s // 2, s // 2),
            "block1": (self.df_dim, s // 4, s // 4),
            "block2": (self.df_dim, s // 4, s // 4),
            "block3": (self.df_dim, s // 4, s // 4),
        }

    def trunk_features(self, x, upto: str | None = None):
        h = x
        for name, block in self.blocks.items():
            h = block(h)
            if name == upto:
                return h
        if upto is not None:
            raise KeyError(f"unknown block {upto!r}; valid blocks: {self.block_names}")
        return h

    def forward(self, x, y=None) -> DiscOutput:
        h = self.trunk_features(x)
        feats = F.relu(h).sum(dim=(2, 3))  # global sum pooling
        source = self.source_head(feats).squeeze(-1)
        if y is not None:
            source = pcgan_logit_from_parts(source, feats, y, self.label_embed)
        rotation = self.rotation_head(feats) if self.rotation_head is not None else None
        return DiscOutput(source=source, rotation=rotation, trunk=feats)


def pcgan_logit_from_parts(base_logit, features, labels, embedding) -> torch.Tensor:
    """Projection conditioning: add <embedding(label), features> to the source logit."""
    if embedding is None:
        raise ConfigError("discriminator was built without a label projection")
    if labels.min() < 0 or labels.max() >= embedding.weight.shape[0]:
        raise ValueError(
            f"label out of range [0, {embedding.weight.shape[0]}): "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return base_logit + (embedding(labels) * features).sum(dim=1)


def pcgan_logit(trunk_features, labels, source_head, embedding) -> torch.Tensor:
    """Label-projected source logit from pooled trunk features."""
    base = source_head(trunk_features).squeeze(-1)
    return pcgan_logit_from_parts(base, trunk_features, labels, embedding)


# ---------------------------------------------------------------------------
# Construction and checkpointing
# ---------------------------------------------------------------------------


def _orthogonal_init(model: nn.Module, generator: torch.Generator):
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.Embedding)):
            nn.init.orthogonal_(m.weight, generator=generator)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
    # restore the near-identity init of the normalization parameter sources,
    # and redraw spectral-norm vectors from the seeded generator
    for m in model.modules():
        if isinstance(m, ConditionalBatchNorm):
            if m.mode == "self_modulated_bn":
                nn.init.zeros_(m.to_gamma.weight)
                nn.init.ones_(m.to_gamma.bias)
                nn.init.zeros_(m.to_beta.weight)
                nn.init.zeros_(m.to_beta.bias)
            elif m.mode == "label_conditional_bn":
                nn.init.ones_(m.gamma_embed.weight)
                nn.init.zeros_(m.beta_embed.weight)
        if isinstance(m, _SpectralNormMixin):
            w_mat = m.weight.detach().reshape(m.weight.shape[0], -1)
            v = F.normalize(torch.randn(w_mat.shape[1], generator=generator), dim=0, eps=SN_EPS)
            m.weight_v.copy_(v)
            m.weight_u.copy_(F.normalize(w_mat.mv(v), dim=0, eps=SN_EPS))


def build_models(config) -> tuple[Generator, Discriminator]:
    """Construct the (generator, discriminator) pair for a config's variant.

    Deterministic: the same config and seed produce bit-identical initial
    parameters (orthogonal init drawn from a config-seeded generator).
    """
    if config.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {config.variant!r}, expected one of {VARIANTS}")
    if config.regularizer not in REGULARIZERS:
        raise ConfigError(
            f"unknown regularizer {config.regularizer!r}, expected one of {REGULARIZERS}"
        )
    if config.variant == "pcgan" and config.num_classes is None:
        raise ConfigError("pcgan needs a labeled dataset: set num_classes")

    norm_mode = {
        "sn_gan": "plain_bn",
        "ssgan": "plain_bn",
        "ssgan_sbn": "self_modulated_bn",
        "pcgan": "label_conditional_bn",
    }[config.variant]
    with_rotation = config.variant in ("ssgan", "ssgan_sbn")
    use_sn = config.regularizer == "spectral_norm"

    gen = Generator(
        image_size=config.image_size,
        channels=config.channels,
        gf_dim=config.gf_dim,
        z_dim=config.z_dim,
        norm_mode=norm_mode,
        num_classes=config.num_classes if config.variant == "pcgan" else None,
        sbn_hidden=config.sbn_hidden,
    )
    disc = Discriminator(
        image_size=config.image_size,
        channels=config.channels,
        df_dim=config.df_dim,
        with_rotation_head=with_rotation,
        num_classes=config.num_classes if config.variant == "pcgan" else None,
        use_sn=use_sn,
    )
    g = torch.Generator().manual_seed(int(config.seed))
    _orthogonal_init(gen, g)
    _orthogonal_init(disc, g)
    return gen, disc


def state_dict_hash(module: nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    buf = io.BytesIO()
    sd = {k: v.cpu() for k, v in module.state_dict().items()}
    torch.save(sd, buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()[:16]


def save_checkpoint(path, generator, discriminator, manifest: dict, extra: dict | None = None):
    """Write one archive holding named parameter arrays plus a manifest."""
    payload = {
        "manifest": dict(manifest),
        "generator": generator.state_dict(),
        "discriminator": discriminator.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path):
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}")


def config_hash(config) -> str:
    """Identity hash of a config. total_steps is excluded so a checkpoint can
    be resumed toward a longer horizon without changing identity."""
    from dataclasses import asdict

    payload = asdict(config)
    payload.pop("total_steps", None)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
