"""Datasets: CIFAR-10 binary archives, procedural oriented glyphs, batch streams.

Images are float32 NCHW tensors in [-1, 1] (the generator's tanh range);
the range is enforced at load time. Batch order is a pure function of
(dataset, batch size, seed): epoch ``e`` uses the permutation drawn from a
generator keyed by (seed, e), and the final partial batch of each epoch is
dropped, so any batch can be recomputed by its global index -- which is what
makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes, channel-planar


@dataclass
class Dataset:
    images: torch.Tensor  # [N, C, H, W] float32 in [-1, 1]
    labels: torch.Tensor | None  # [N] int64, optional
    split: str  # "train" | "test"
    name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {tuple(self.images.shape)}")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"pixel values must lie in [-1, 1], got range [{lo}, {hi}]")
        if self.labels is not None:
            if self.labels.shape[0] != self.images.shape[0]:
                raise ValueError("labels length must match images")
            if self.labels.numel() and self.labels.min() < 0:
                raise ValueError("labels must be nonnegative")
        self._hash = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int | None:
        if self.labels is None:
            return None
        return int(self.labels.max()) + 1

    @property
    def version_hash(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            h.update(f"{self.name}/{self.split}".encode())
            h.update(self.images.numpy().tobytes())
            if self.labels is not None:
                h.update(self.labels.numpy().tobytes())
            self._hash = h.hexdigest()[:16]
        return self._hash


def _bytes_to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 255.0 * 2.0 - 1.0


def load_cifar10(root_path, split: str) -> Dataset:
    """Decode the standard CIFAR-10 binary archive.

    ``root_path`` may point at the directory holding the ``*.bin`` files or
    at a parent containing ``cifar-10-batches-bin/``. Each record is one
    label byte followed by 3072 channel-planar pixel bytes.
    """
    if split not in CIFAR10_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root_path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    paths = [root / f for f in CIFAR10_FILES[split]]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(
            "CIFAR-10 binary archive incomplete; expected files: "
            + ", ".join(str(p) for p in paths)
            + f"; missing: {missing}"
        )
    records = []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % _CIFAR_RECORD != 0:
            raise ValueError(f"{p} is corrupt: size {raw.size} not a multiple of {_CIFAR_RECORD}")
        records.append(raw.reshape(-1, _CIFAR_RECORD))
    data = np.concatenate(records, axis=0)
    labels = torch.from_numpy(data[:, 0].astype(np.int64))
    images = _bytes_to_unit_range(data[:, 1:]).reshape(-1, 3, 32, 32)
    return Dataset(images=torch.from_numpy(images), labels=labels, split=split, name="cifar10")


# ---------------------------------------------------------------------------
# Synthetic oriented-glyph dataset
# ---------------------------------------------------------------------------

# Each glyph is a set of line segments in a unit square, chosen so that no
# class is invariant under any quarter-turn -- the rotation pretext task must
# be learnable from these shapes.
_GLYPH_SEGMENTS = {
    0: [((0.2, 0.1), (0.2, 0.9)), ((0.2, 0.1), (0.8, 0.1)), ((0.2, 0.5), (0.7, 0.5))],  # F
    1: [((0.2, 0.1), (0.2, 0.9)), ((0.2, 0.9), (0.8, 0.9))],  # L
    2: [((0.2, 0.1), (0.8, 0.1)), ((0.7, 0.1), (0.7, 0.8)), ((0.7, 0.8), (0.3, 0.9))],  # J
    3: [((0.2, 0.1), (0.2, 0.9)), ((0.2, 0.1), (0.8, 0.15)), ((0.8, 0.15), (0.8, 0.45)),
        ((0.8, 0.45), (0.2, 0.5))],  # P
    4: [((0.25, 0.1), (0.25, 0.9)), ((0.25, 0.1), (0.8, 0.1)), ((0.25, 0.5), (0.7, 0.5)),
        ((0.25, 0.9), (0.8, 0.9))],  # E
    5: [((0.1, 0.15), (0.9, 0.15)), ((0.5, 0.15), (0.5, 0.9))],  # T
    6: [((0.5, 0.1), (0.5, 0.9)), ((0.5, 0.1), (0.2, 0.4)), ((0.5, 0.1), (0.8, 0.4))],  # arrow
    7: [((0.3, 0.1), (0.3, 0.9)), ((0.3, 0.1), (0.85, 0.25)), ((0.85, 0.25), (0.3, 0.45))],  # flag
    8: [((0.25, 0.1), (0.25, 0.9)), ((0.25, 0.5), (0.75, 0.5)), ((0.75, 0.5), (0.75, 0.9))],  # h
    9: [((0.15, 0.1), (0.85, 0.1)), ((0.85, 0.1), (0.3, 0.9))],  # 7
}
NUM_GLYPH_CLASSES = len(_GLYPH_SEGMENTS)


def _segment_mask(size, segments, origin, scale, thickness):
    """Rasterize scaled/translated segments: pixel is on if within `thickness`."""
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([(xs + 0.5) / size, (ys + 0.5) / size], axis=-1)  # [S,S,2] in [0,1]
    mask = np.zeros((size, size), dtype=bool)
    for (x0, y0), (x1, y1) in segments:
        a = np.array([x0, y0]) * scale + origin
        b = np.array([x1, y1]) * scale + origin
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            t = np.zeros(pts.shape[:2])
        else:
            t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        dist = np.linalg.norm(pts - closest, axis=-1)
        mask |= dist < thickness
    return mask


def make_synthetic_shapes(
    n: int,
    size: int = 32,
    seed: int = 0,
    num_classes: int = NUM_GLYPH_CLASSES,
    noise: float = 0.15,
    split: str = "train",
) -> Dataset:
    """Render orientation-bearing glyphs with random position, scale and color.

    Classes are exactly balanced (n must be divisible by num_classes) and
    none of the glyphs has quarter- or half-turn symmetry. Deterministic
    given the seed.
    """
    if size % 4 != 0:
        raise ValueError(f"size must be divisible by 4, got {size}")
    if not 1 <= num_classes <= NUM_GLYPH_CLASSES:
        raise ValueError(f"num_classes must be in 1..{NUM_GLYPH_CLASSES}")
    if n % num_classes != 0:
        raise ValueError(f"n={n} must be divisible by num_classes={num_classes}")
    rng = np.random.default_rng([seed, {"train": 0, "test": 1}[split]])
    labels = np.repeat(np.arange(num_classes), n // num_classes)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        cls = int(labels[i])
        scale = rng.uniform(0.45, 0.8)
        origin = rng.uniform(0.05, 0.95 - scale, size=2)
        thickness = rng.uniform(0.035, 0.06)
        mask = _segment_mask(size, _GLYPH_SEGMENTS[cls], origin, scale, thickness)
        bg = rng.uniform(-1.0, -0.2, size=3)
        fg = rng.uniform(0.2, 1.0, size=3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, -1.0, 1.0)
    # deterministic shuffle so class order carries no information
    perm = rng.permutation(n)
    return Dataset(
        images=torch.from_numpy(images[perm]),
        labels=torch.from_numpy(labels[perm].astype(np.int64)),
        split=split,
        name=f"shapes{num_classes}",
    )


def save_dataset(dataset: Dataset, directory):
    """Cache a dataset as manifest.json + a raw array blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"images": dataset.images.numpy()}
    if dataset.labels is not None:
        arrays["labels"] = dataset.labels.numpy()
    np.savez(directory / "arrays.npz", **arrays)
    manifest = {
        "name": dataset.name,
        "split": dataset.split,
        "n": len(dataset),
        "version_hash": dataset.version_hash,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = np.load(directory / "arrays.npz")
    labels = torch.from_numpy(arrays["labels"]) if "labels" in arrays else None
    ds = Dataset(
        images=torch.from_numpy(arrays["images"]),
        labels=labels,
        split=manifest["split"],
        name=manifest["name"],
    )
    if ds.version_hash != manifest["version_hash"]:
        raise ValueError(f"dataset blob in {directory} does not match its manifest hash")
    return ds


# ---------------------------------------------------------------------------
# Deterministic batch streams
# ---------------------------------------------------------------------------


class BatchStream:
    """Epoch-shuffled batches with deterministic random access by global index."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if batch_size > len(dataset):
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.batches_per_epoch = len(dataset) // batch_size
        self._epoch = None
        self._perm = None

    def _epoch_perm(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))
            self._epoch = epoch
        return self._perm

    def batch_at(self, index: int):
        """(images, labels) of global batch ``index``; labels is None for unlabeled data."""
        epoch, offset = divmod(index, self.batches_per_epoch)
        perm = self._epoch_perm(epoch)
        idx = torch.from_numpy(
            perm[offset * self.batch_size : (offset + 1) * self.batch_size].copy()
        )
        images = self.dataset.images[idx]
        labels = self.dataset.labels[idx] if self.dataset.labels is not None else None
        return images, labels

    def __iter__(self):
        i = 0
        while True:
            yield self.batch_at(i)
            i += 1


def batch_stream(dataset: Dataset, batch_size: int, seed: int) -> BatchStream:
    return BatchStream(dataset, batch_size, seed)
