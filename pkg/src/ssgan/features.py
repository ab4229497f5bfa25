"""Frozen feature extractor backing the desk-scale FID.

A small convolutional classifier trained on the evaluation dataset's train
split stands in for a large pretrained embedding network. After training it
is frozen and versioned by a content hash; FID values are only comparable
between reports carrying the same hash. The embedding is the 256-d
projection after global average pooling.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BatchStream, Dataset

EMBED_DIM = 256


class FeatureExtractor(nn.Module):
    """Plain conv stack -> global average pool -> 256-d embedding -> class logits."""

    def __init__(self, channels=3, num_classes=10, width=64, embed_dim=EMBED_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        self.conv = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.project = nn.Linear(4 * width, embed_dim)
        self.classify = nn.Linear(embed_dim, num_classes)
        self._frozen = False

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        h = self.conv(images)
        h = h.mean(dim=(2, 3))
        return self.project(h)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classify(F.relu(self.embed(images)))

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def content_hash(self) -> str:
        import io

        buf = io.BytesIO()
        torch.save({k: v.cpu() for k, v in self.state_dict().items()}, buf)
        return hashlib.sha256(buf.getvalue()).hexdigest()[:16]


def train_feature_extractor(
    dataset: Dataset,
    steps: int = 3000,
    batch_size: int = 128,
    lr: float = 2e-4,
    width: int = 64,
    seed: int = 0,
) -> FeatureExtractor:
    """Train the classifier on a labeled dataset, then freeze it."""
    if dataset.labels is None:
        raise ValueError("feature extractor training needs a labeled dataset")
    torch.manual_seed(seed)
    model = FeatureExtractor(
        channels=dataset.images.shape[1], num_classes=dataset.num_classes, width=width
    )
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    stream = BatchStream(dataset, batch_size=min(batch_size, len(dataset)), seed=seed)
    model.train()
    for i in range(steps):
        images, labels = stream.batch_at(i)
        opt.zero_grad()
        loss = F.cross_entropy(model(images), labels)
        loss.backward()
        opt.step()
    return model.freeze()


def save_extractor(model: FeatureExtractor, path, trained_on: str = ""):
    payload = {
        "manifest": {
            "content_hash": model.content_hash,
            "embed_dim": model.embed_dim,
            "trained_on": trained_on,
        },
        "state": model.state_dict(),
        "arch": {
            "channels": model.conv[0].in_channels,
            "num_classes": model.classify.out_features,
            "width": model.conv[0].out_channels,
            "embed_dim": model.embed_dim,
        },
    }
    torch.save(payload, path)


def load_extractor(path) -> FeatureExtractor:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = FeatureExtractor(**payload["arch"])
    model.load_state_dict(payload["state"])
    model.freeze()
    if model.content_hash != payload["manifest"]["content_hash"]:
        raise ValueError(f"extractor at {path} does not match its manifest hash")
    return model


def get_or_train_extractor(
    dataset: Dataset, cache_dir, steps: int = 3000, width: int = 64, seed: int = 0
) -> FeatureExtractor:
    """Load the cached extractor for this dataset version, training it if absent."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"extractor_{dataset.version_hash}_w{width}_s{steps}.pt"
    if path.exists():
        return load_extractor(path)
    model = train_feature_extractor(dataset, steps=steps, width=width, seed=seed)
    save_extractor(model, path, trained_on=dataset.version_hash)
    return model
