"""Frechet distance between Gaussian fits of embedded image sets.

The distance between N(mu_x, sigma_x) and N(mu_g, sigma_g) is

    ||mu_x - mu_g||^2 + Tr(sigma_x + sigma_g - 2 (sigma_x sigma_g)^(1/2)).

The cross term is evaluated through the similarity identity
Tr((sigma_x sigma_g)^(1/2)) = Tr((sigma_x^(1/2) sigma_g sigma_x^(1/2))^(1/2)),
which keeps every matrix square root on a symmetric PSD argument; the raw
product sigma_x sigma_g is not symmetric and its direct square root is
numerically treacherous.

Values produced with the desk-scale feature extractor are internally
consistent (same extractor hash) but not comparable to scores computed with
other embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

import torch


@dataclass(frozen=True)
class GaussianStats:
    """Mean vector and covariance matrix of an embedded sample set."""

    mu: np.ndarray  # [F]
    sigma: np.ndarray  # [F, F], symmetric PSD up to numerical tolerance

    def __post_init__(self):
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise ValueError(
                f"inconsistent shapes: mu {self.mu.shape}, sigma {self.sigma.shape}"
            )


def gaussian_stats(features) -> GaussianStats:
    """Column means and unbiased (N-1) covariance, covariance symmetrized."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be [N, F], got shape {feats.shape}")
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {n}")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma)


def matrix_sqrt_spd(a: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition.

    Small negative eigenvalues (numerical noise) are clamped to zero.
    Rejects matrices that are not symmetric within 1e-8 relative to their
    largest entry.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    w, v = scipy.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(x: GaussianStats, g: GaussianStats) -> float:
    """Frechet distance between two Gaussian fits; tiny negative results clamp to 0."""
    if x.mu.shape != g.mu.shape:
        raise ValueError(
            f"feature dimension mismatch: {x.mu.shape[0]} vs {g.mu.shape[0]}"
        )
    diff = x.mu - g.mu
    x_half = matrix_sqrt_spd(x.sigma)
    inner = x_half @ g.sigma @ x_half
    inner = (inner + inner.T) / 2.0
    cross_trace = np.trace(matrix_sqrt_spd(inner))
    value = float(diff @ diff + np.trace(x.sigma) + np.trace(g.sigma) - 2.0 * cross_trace)
    if value < -1e-6:
        raise ValueError(f"frechet distance came out negative beyond tolerance: {value}")
    return max(value, 0.0)


@dataclass(frozen=True)
class FidReport:
    value: float
    n_real: int
    n_fake: int
    extractor_hash: str


def _check_pixel_range(images: torch.Tensor, name: str):
    lo, hi = float(images.min()), float(images.max())
    if lo < -1.0 - 1e-5 or hi > 1.0 + 1e-5:
        raise ValueError(
            f"{name} pixels out of the [-1, 1] convention (range [{lo:.3f}, {hi:.3f}]); "
            "rescale before computing FID"
        )


def embed_images(images: torch.Tensor, extractor, batch_size: int = 256) -> np.ndarray:
    """Run the frozen extractor over an image tensor, returning [N, F] features."""
    _check_pixel_range(images, "images")
    feats = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            feats.append(extractor.embed(images[i : i + batch_size]).cpu().numpy())
    return np.concatenate(feats, axis=0)


def compute_fid(real_images: torch.Tensor, fake_images: torch.Tensor, extractor) -> FidReport:
    """Embed both sets, fit Gaussians, return the distance with sample counts."""
    if real_images.shape[0] < 2 or fake_images.shape[0] < 2:
        raise ValueError("need at least 2 images on each side")
    if real_images.shape[1:] != fake_images.shape[1:]:
        raise ValueError(
            f"image shape mismatch: {tuple(real_images.shape[1:])} vs "
            f"{tuple(fake_images.shape[1:])}"
        )
    real_stats = gaussian_stats(embed_images(real_images, extractor))
    fake_stats = gaussian_stats(embed_images(fake_images, extractor))
    return FidReport(
        value=frechet_distance(real_stats, fake_stats),
        n_real=real_images.shape[0],
        n_fake=fake_images.shape[0],
        extractor_hash=extractor.content_hash,
    )


def split_half_fid(images: torch.Tensor, extractor) -> float:
    """FID between disjoint halves of one sample set: the metric's noise floor."""
    n = images.shape[0] // 2
    if n < 2:
        raise ValueError("need at least 4 images for a split-half estimate")
    return compute_fid(images[:n], images[n : 2 * n], extractor).value
