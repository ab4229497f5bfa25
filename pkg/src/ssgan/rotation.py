"""Quarter-turn rotation task: rotate image batches and label the rotation.

Images are NCHW tensors. Rotation label ``r`` means ``r`` successive 90-degree
counter-clockwise turns of the (H, W) plane, so labels live in {0, 1, 2, 3}
and compose additively mod 4. All rotations are pure index permutations --
no interpolation, no pixel values created or destroyed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

ROTATION_ANGLES = (0, 90, 180, 270)
NUM_ROTATIONS = len(ROTATION_ANGLES)


class Source(Enum):
    REAL = "real"
    FAKE = "fake"


@dataclass(frozen=True)
class RotationBatch:
    """Rotated images with their rotation labels and a real/fake provenance flag."""

    images: torch.Tensor  # [N, C, H, W]
    labels: torch.Tensor  # [N] int64 in 0..3
    source: Source

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images/labels length mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )


def rotate_image(image: torch.Tensor, r: int) -> torch.Tensor:
    """Rotate one image (or a batch) by ``r`` quarter turns counter-clockwise.

    Works on [..., H, W]; requires H == W so the turn is a lossless
    permutation of the entries.
    """
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(
            f"rotation requires square images, got H={image.shape[-2]} W={image.shape[-1]}"
        )
    r = int(r)
    if not 0 <= r <= 3:
        raise ValueError(f"rotation label must be in 0..3, got {r}")
    if r == 0:
        return image
    return torch.rot90(image, k=r, dims=(-2, -1))


def make_rotation_batch(batch: torch.Tensor, source: Source) -> RotationBatch:
    """Build the rotation-prediction inputs from a quarter of a batch.

    Takes the first N/4 images of ``batch`` (batches are shuffled upstream,
    so a positional subset is unbiased) and emits each of them in all four
    orientations. The output has the same size N as the input and an exactly
    uniform label histogram: N/4 copies of each label, grouped by rotation.
    """
    n = batch.shape[0]
    if n % 4 != 0:
        raise ValueError(f"batch size must be divisible by 4, got {n}")
    subset = batch[: n // 4]
    images = torch.cat([rotate_image(subset, r) for r in range(NUM_ROTATIONS)], dim=0)
    labels = torch.arange(NUM_ROTATIONS, device=batch.device).repeat_interleave(n // 4)
    return RotationBatch(images=images, labels=labels, source=source)
