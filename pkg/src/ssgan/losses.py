"""Scalar training objectives for all GAN variants.

The source (real/fake) game is the cross-entropy GAN objective by default:
the discriminator ascends

    V = E_real[log sigmoid(d_real)] + E_fake[log(1 - sigmoid(d_fake))]

(so its source loss is -V), and the generator descends the non-saturating
objective -E[log sigmoid(d_fake)]. A hinge variant is available behind
``kind='hinge'`` since spectrally normalized baselines are often trained
with it; cross-entropy stays the default.

The rotation term is the mean log-probability the rotation head assigns to
the true quarter-turn label; it is always <= 0 and equals 0 only for a
perfect predictor. The generator is rewarded (weight alpha) for fake images
whose rotations are detectable; the discriminator is rewarded (weight beta)
for detecting rotations of real images only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .rotation import NUM_ROTATIONS


class ConfigError(ValueError):
    """Invalid configuration value (negative weight, missing labels, ...)."""


@dataclass(frozen=True)
class LossWeights:
    """Auxiliary-loss strengths: rotation weights for G and D plus gradient-penalty strength."""

    alpha: float = 0.2
    beta: float = 1.0
    gp_lambda: float = 10.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.gp_lambda < 0:
            raise ConfigError(f"gp_lambda must be nonnegative, got {self.gp_lambda}")


def _check_nonempty(t: torch.Tensor, name: str):
    if t.numel() == 0:
        raise ValueError(f"{name} is empty")


def gan_value(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Empirical two-sided value of the source game from pre-sigmoid logits.

    Computed with log-sigmoid forms, so extreme logits saturate to 0 instead
    of producing log(0).
    """
    _check_nonempty(real_logits, "real_logits")
    _check_nonempty(fake_logits, "fake_logits")
    # log(1 - sigmoid(x)) == logsigmoid(-x)
    return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()


def rotation_term(rot_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean log-probability of the true rotation under softmax(rot_logits)."""
    _check_nonempty(rot_logits, "rot_logits")
    if rot_logits.ndim != 2 or rot_logits.shape[1] != NUM_ROTATIONS:
        raise ValueError(f"rot_logits must be [N, {NUM_ROTATIONS}], got {tuple(rot_logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= NUM_ROTATIONS):
        raise ValueError(f"rotation labels must be in 0..{NUM_ROTATIONS - 1}")
    return -F.cross_entropy(rot_logits, labels.long())


def _generator_source_loss(fake_logits: torch.Tensor, kind: str) -> torch.Tensor:
    _check_nonempty(fake_logits, "fake_logits")
    if kind == "cross_entropy":
        # non-saturating form
        return -F.logsigmoid(fake_logits).mean()
    if kind == "hinge":
        return -fake_logits.mean()
    raise ConfigError(f"unknown loss kind {kind!r}")


def _discriminator_source_loss(
    real_logits: torch.Tensor, fake_logits: torch.Tensor, kind: str
) -> torch.Tensor:
    if kind == "cross_entropy":
        return -gan_value(real_logits, fake_logits)
    if kind == "hinge":
        _check_nonempty(real_logits, "real_logits")
        _check_nonempty(fake_logits, "fake_logits")
        return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()
    raise ConfigError(f"unknown loss kind {kind!r}")


def generator_loss(
    fake_src_logits: torch.Tensor,
    fake_rot_logits: torch.Tensor | None,
    fake_rot_labels: torch.Tensor | None,
    weights: LossWeights,
    kind: str = "cross_entropy",
) -> torch.Tensor:
    """Generator objective: source loss minus alpha times the fake-rotation term.

    Pass ``fake_rot_logits=None`` (or alpha == 0 with a rotation-free
    variant) to recover the plain unconditional generator loss exactly.
    """
    loss = _generator_source_loss(fake_src_logits, kind)
    if fake_rot_logits is not None and weights.alpha != 0:
        loss = loss - weights.alpha * rotation_term(fake_rot_logits, fake_rot_labels)
    return loss


def discriminator_loss(
    real_src_logits: torch.Tensor,
    fake_src_logits: torch.Tensor,
    real_rot_logits: torch.Tensor | None,
    real_rot_labels: torch.Tensor | None,
    weights: LossWeights,
    kind: str = "cross_entropy",
) -> torch.Tensor:
    """Discriminator objective: source loss minus beta times the real-rotation term.

    The rotation term sees rotated *real* images only; fake rotations never
    enter this loss.
    """
    loss = _discriminator_source_loss(real_src_logits, fake_src_logits, kind)
    if real_rot_logits is not None and weights.beta != 0:
        loss = loss - weights.beta * rotation_term(real_rot_logits, real_rot_labels)
    return loss


def gradient_penalty(interp_grad_norms: torch.Tensor, gp_lambda: float) -> torch.Tensor:
    """Penalty pushing interpolate gradient norms toward 1: lambda * mean((norm - 1)^2)."""
    if gp_lambda < 0:
        raise ConfigError(f"gp_lambda must be nonnegative, got {gp_lambda}")
    _check_nonempty(interp_grad_norms, "interp_grad_norms")
    return gp_lambda * ((interp_grad_norms - 1.0) ** 2).mean()


def interpolate_grad_norms(
    discriminator,
    real: torch.Tensor,
    fake: torch.Tensor,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Gradient norms of the source logit at random real/fake interpolates.

    Differentiable w.r.t. discriminator parameters (double backprop), so the
    result can feed :func:`gradient_penalty` inside a training loss.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    n = real.shape[0]
    if eps is None:
        eps = torch.rand(n, 1, 1, 1, generator=generator, dtype=real.dtype, device=real.device)
    interp = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    logits = discriminator(interp).source
    grads = torch.autograd.grad(
        outputs=logits.sum(), inputs=interp, create_graph=True, retain_graph=True
    )[0]
    return grads.reshape(n, -1).norm(2, dim=1)
