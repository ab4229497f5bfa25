"""Linear probes on frozen discriminator features.

Representation quality of a trained discriminator is measured by extracting
a named trunk block's activations, max-pooling them to a budgeted dimension,
and training a multinomial logistic regression on class labels with a
momentum-SGD schedule. The learning rate is selected on a held-out tenth of
the training data; top-1 accuracy is reported on the test split, averaged
over probe seeds.

Also provides the rotation-only baseline: the same discriminator trained on
the rotation task alone, with the adversarial game ablated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .config import SsGANConfig, config_from_dict
from .data import BatchStream, Dataset
from .models import Discriminator, build_models, load_checkpoint, state_dict_hash
from .rotation import Source, make_rotation_batch


@dataclass(frozen=True)
class ProbeConfig:
    block_name: str = "block3"
    target_dim: int = 9216
    lr: float = 0.1
    lr_grid: tuple = ()  # extra candidates; the default lr always competes
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 100
    decay_every: int = 30
    decay_factor: float = 0.1
    val_fraction: float = 0.1
    seeds: tuple = (0, 1, 2)


@dataclass(frozen=True)
class ProbeResult:
    block_name: str
    top1: float  # mean over seeds
    std: float
    step: int = -1
    variant: str = ""
    seeds: tuple = ()


def extract_block_features(
    discriminator: Discriminator, images: torch.Tensor, block_name: str, batch_size: int = 256
) -> torch.Tensor:
    """Named trunk block activations with gradients disabled; the model is untouched."""
    if block_name not in discriminator.block_names:
        raise KeyError(
            f"unknown block {block_name!r}; valid blocks: {discriminator.block_names}"
        )
    was_training = discriminator.training
    discriminator.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            chunks.append(discriminator.trunk_features(images[i : i + batch_size], upto=block_name))
    discriminator.train(was_training)
    return torch.cat(chunks, dim=0)


def pool_features(features: torch.Tensor, target_dim: int) -> torch.Tensor:
    """Adaptive max pooling to the largest s x s grid with s^2 * c <= target_dim, then flatten."""
    if features.ndim != 4:
        raise ValueError(f"features must be [N, C, H, W], got {tuple(features.shape)}")
    n, c, h, w = features.shape
    if target_dim < c:
        raise ValueError(f"target_dim {target_dim} is below the channel count {c}")
    s = int(np.sqrt(target_dim / c))
    s = max(1, min(s, h, w))
    pooled = F.adaptive_max_pool2d(features, s)
    return pooled.reshape(n, -1)


def _sgd_logistic_regression(
    train_x, train_y, val_x, val_y, num_classes, config: ProbeConfig, lr: float, seed: int
):
    """Multinomial logistic regression by momentum SGD; returns (weights, val_top1)."""
    rng = np.random.default_rng([seed, 17])
    n, f = train_x.shape
    probe = torch.nn.Linear(f, num_classes)
    # zero init: convex problem, permutation-symmetric start
    torch.nn.init.zeros_(probe.weight)
    torch.nn.init.zeros_(probe.bias)
    opt = torch.optim.SGD(probe.parameters(), lr=lr, momentum=config.momentum)
    sched = torch.optim.lr_scheduler.StepLR(
        opt, step_size=config.decay_every, gamma=config.decay_factor
    )
    bs = min(config.batch_size, n)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for i in range(0, n - bs + 1, bs):
            idx = torch.from_numpy(perm[i : i + bs].copy())
            opt.zero_grad()
            loss = F.cross_entropy(probe(train_x[idx]), train_y[idx])
            loss.backward()
            opt.step()
        sched.step()
    with torch.no_grad():
        val_top1 = float((probe(val_x).argmax(dim=1) == val_y).float().mean())
    return probe, val_top1


def _top1(probe, x, y) -> float:
    with torch.no_grad():
        return float((probe(x).argmax(dim=1) == y).float().mean())


def fit_linear_probe(
    features: torch.Tensor,
    labels: torch.Tensor,
    test_features: torch.Tensor,
    test_labels: torch.Tensor,
    config: ProbeConfig = ProbeConfig(),
    seed: int = 0,
    block_name: str = "",
):
    """Train the probe with lr selection on a held-out validation tenth.

    Returns (probe module, ProbeResult with the test-split top-1).
    """
    if labels.unique().numel() < 2:
        raise ValueError("need at least 2 classes to fit a probe")
    num_classes = int(labels.max()) + 1
    n = features.shape[0]
    rng = np.random.default_rng([seed, 3])
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    val_idx = torch.from_numpy(perm[:n_val].copy())
    train_idx = torch.from_numpy(perm[n_val:].copy())

    candidates = list(dict.fromkeys((config.lr, *config.lr_grid)))
    best = None
    for lr in candidates:
        probe, val_top1 = _sgd_logistic_regression(
            features[train_idx],
            labels[train_idx],
            features[val_idx],
            labels[val_idx],
            num_classes,
            config,
            lr,
            seed,
        )
        if best is None or val_top1 > best[1]:
            best = (probe, val_top1, lr)
    probe = best[0]
    result = ProbeResult(
        block_name=block_name or config.block_name,
        top1=_top1(probe, test_features, test_labels),
        std=0.0,
        seeds=(seed,),
    )
    return probe, result


def probe_block(
    discriminator: Discriminator,
    train_dataset: Dataset,
    test_dataset: Dataset,
    block_name: str,
    config: ProbeConfig = ProbeConfig(),
    step: int = -1,
    variant: str = "",
) -> ProbeResult:
    """Probe one block, averaging top-1 over the configured probe seeds."""
    train_feats = pool_features(
        extract_block_features(discriminator, train_dataset.images, block_name), config.target_dim
    )
    test_feats = pool_features(
        extract_block_features(discriminator, test_dataset.images, block_name), config.target_dim
    )
    scores = []
    for seed in config.seeds:
        _, res = fit_linear_probe(
            train_feats,
            train_dataset.labels,
            test_feats,
            test_dataset.labels,
            config,
            seed=seed,
            block_name=block_name,
        )
        scores.append(res.top1)
    return ProbeResult(
        block_name=block_name,
        top1=float(np.mean(scores)),
        std=float(np.std(scores)),
        step=step,
        variant=variant,
        seeds=tuple(config.seeds),
    )


def discriminator_from_checkpoint(checkpoint_path) -> tuple[Discriminator, dict]:
    payload = load_checkpoint(checkpoint_path)
    manifest = payload["manifest"]
    cfg = config_from_dict(manifest["config"])
    _, disc = build_models(cfg)
    disc.load_state_dict(payload["discriminator"])
    disc.eval()
    return disc, manifest


def probe_all_blocks(
    checkpoint_path,
    train_dataset: Dataset,
    test_dataset: Dataset,
    config: ProbeConfig = ProbeConfig(),
) -> list[ProbeResult]:
    """One ProbeResult per trunk block of the checkpointed discriminator."""
    disc, manifest = discriminator_from_checkpoint(checkpoint_path)
    before = state_dict_hash(disc)
    results = [
        probe_block(
            disc,
            train_dataset,
            test_dataset,
            name,
            config,
            step=manifest["step"],
            variant=manifest["variant"],
        )
        for name in disc.block_names
    ]
    assert state_dict_hash(disc) == before, "probing must not modify the discriminator"
    return results


def train_rotation_baseline(config: SsGANConfig, dataset: Dataset) -> Discriminator:
    """Train the discriminator on the rotation task alone (adversarial game ablated).

    Same architecture, optimizer, and quarter-batch construction as the
    self-supervised runs; only the rotation head's log-likelihood is
    maximized.
    """
    cfg = dataclasses.replace(config, variant="ssgan")
    _, disc = build_models(cfg)
    opt = torch.optim.Adam(
        disc.parameters(), lr=cfg.adam.lr, betas=(cfg.adam.beta1, cfg.adam.beta2)
    )
    stream = BatchStream(dataset, cfg.batch_size, cfg.seed)
    disc.train()
    for i in range(cfg.total_steps):
        images, _ = stream.batch_at(i)
        rb = make_rotation_batch(images, Source.REAL)
        opt.zero_grad()
        loss = -L.rotation_term(disc(rb.images).rotation, rb.labels)
        loss.backward()
        opt.step()
    disc.eval()
    return disc
