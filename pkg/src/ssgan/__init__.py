"""Desk-scale self-supervised GAN training and evaluation.

A GAN whose discriminator carries a second head that predicts which
quarter-turn rotation was applied to an image. The auxiliary task keeps the
discriminator's features useful while the generator's distribution drifts,
which stabilizes training without needing class labels.

Subpackages cover the full experimental loop: rotation task construction,
generator/discriminator architectures, losses, the training loop with
checkpointing, FID evaluation, linear probes on frozen discriminator
features, the cyclic-task forgetting experiment, and hyperparameter sweeps.
"""

__version__ = "0.1.0"
