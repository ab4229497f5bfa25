"""Cyclic one-vs-all classification under distribution shift.

A small classifier sees a sequence of binary tasks -- "is this image class
k?" -- where k advances every ``steps_per_task`` updates and wraps around
after all classes. The vanilla classifier forgets: accuracy collapses toward
chance at every switch, even when a task repeats. Adding the quarter-turn
rotation prediction loss to the same trunk preserves transferable features,
so accuracy keeps improving across switches.

The run extends one task segment past the final cycle boundary so the
return to the first task is observable in the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .data import Dataset
from .rotation import Source, make_rotation_batch

VARIANTS = ("vanilla", "with_selfsup")


@dataclass(frozen=True)
class TaskSchedule:
    num_classes: int = 10
    steps_per_task: int = 1000
    cycles: int = 1

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")

    def task_at(self, step: int) -> int:
        return (step // self.steps_per_task) % self.num_classes

    @property
    def cycle_length(self) -> int:
        return self.num_classes * self.steps_per_task

    @property
    def total_steps(self) -> int:
        # one extra segment past the last cycle: shows the return to task 0
        return self.cycles * self.cycle_length + self.steps_per_task

    @property
    def switch_steps(self) -> list[int]:
        return list(range(self.steps_per_task, self.total_steps, self.steps_per_task))


@dataclass
class AccuracyTrace:
    variant: str
    steps: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    task_ids: list = field(default_factory=list)
    switch_steps: list = field(default_factory=list)
    cycle_end: int = 0

    def rows(self):
        return [
            {"step": s, "task_id": t, "accuracy": a, "variant": self.variant}
            for s, t, a in zip(self.steps, self.task_ids, self.accuracies)
        ]

    def window_mean(self, lo: int, hi: int) -> float:
        vals = [a for s, a in zip(self.steps, self.accuracies) if lo < s <= hi]
        if not vals:
            raise ValueError(f"no evaluation points in window ({lo}, {hi}]")
        return float(np.mean(vals))


class TaskSampler:
    """Balanced binary batches for the scheduled class, plus held-out eval pools."""

    def __init__(self, dataset: Dataset, schedule: TaskSchedule, batch_size: int, seed: int,
                 eval_per_class: int = 100):
        if dataset.labels is None:
            raise ValueError("the task sequence needs a labeled dataset")
        if dataset.num_classes < schedule.num_classes:
            raise ValueError(
                f"dataset has {dataset.num_classes} classes, schedule needs "
                f"{schedule.num_classes}"
            )
        if batch_size % 2 != 0:
            raise ValueError("batch_size must be even for balanced batches")
        self.dataset = dataset
        self.schedule = schedule
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 23])
        labels = dataset.labels.numpy()
        self.train_idx = {}
        self.eval_idx = {}
        for c in range(schedule.num_classes):
            idx = np.nonzero(labels == c)[0]
            if idx.size < eval_per_class + batch_size // 2:
                raise ValueError(
                    f"class {c} has only {idx.size} samples; need at least "
                    f"{eval_per_class + batch_size // 2}"
                )
            self.eval_idx[c] = idx[:eval_per_class]
            self.train_idx[c] = idx[eval_per_class:]
        self._eval_cache = {}

    def batch(self, step: int):
        """(images, binary_labels, task_id) with exactly half positives."""
        task = self.schedule.task_at(step)
        half = self.batch_size // 2
        pos = self.rng.choice(self.train_idx[task], size=half, replace=False)
        other = [c for c in self.train_idx if c != task]
        neg_classes = self.rng.choice(other, size=half, replace=True)
        neg = np.array(
            [self.rng.choice(self.train_idx[c]) for c in neg_classes], dtype=np.int64
        )
        idx = torch.from_numpy(np.concatenate([pos, neg]))
        images = self.dataset.images[idx]
        labels = torch.zeros(self.batch_size)
        labels[:half] = 1.0
        return images, labels, task

    def eval_pool(self, task: int):
        """Fixed balanced evaluation pool for one task (held-out indices)."""
        if task not in self._eval_cache:
            pos = self.eval_idx[task]
            rng = np.random.default_rng([task, 41])
            other = np.concatenate([v for c, v in self.eval_idx.items() if c != task])
            neg = rng.choice(other, size=pos.size, replace=False)
            idx = torch.from_numpy(np.concatenate([pos, neg]))
            labels = torch.zeros(2 * pos.size)
            labels[: pos.size] = 1.0
            self._eval_cache[task] = (self.dataset.images[idx], labels)
        return self._eval_cache[task]


def make_task_sequence(dataset: Dataset, schedule: TaskSchedule, batch_size: int = 64,
                       seed: int = 0):
    """Stream of (batch, binary_labels, task_id) following the schedule."""
    sampler = TaskSampler(dataset, schedule, batch_size, seed)

    def generate():
        for step in range(schedule.total_steps):
            yield sampler.batch(step)

    return generate()


class OnlineClassifier(nn.Module):
    """Four-layer conv trunk (mirroring the GAN discriminator's scale) with
    a binary task head and a rotation head on shared features."""

    def __init__(self, channels=3, width=32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(4 * width, 4 * width, 3, padding=1),
            nn.ReLU(),
        )
        self.task_head = nn.Linear(4 * width, 1)
        self.rotation_head = nn.Linear(4 * width, 4)

    def features(self, x):
        return self.trunk(x).mean(dim=(2, 3))

    def forward(self, x):
        f = self.features(x)
        return self.task_head(f).squeeze(-1), self.rotation_head(f)


def run_forgetting_experiment(
    variant: str,
    schedule: TaskSchedule,
    seed: int,
    dataset: Dataset,
    selfsup_weight: float = 1.0,
    batch_size: int = 64,
    lr: float = 0.0002,
    width: int = 32,
    eval_every: int = 50,
    quiet: bool = True,
) -> AccuracyTrace:
    """Train online over the task stream, logging current-task accuracy.

    ``with_selfsup`` adds the rotation prediction loss (quarter-batch
    construction) on each batch; the task head itself is identical.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    torch.manual_seed(seed)
    sampler = TaskSampler(dataset, schedule, batch_size, seed)
    model = OnlineClassifier(channels=dataset.images.shape[1], width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    trace = AccuracyTrace(
        variant=variant,
        switch_steps=schedule.switch_steps,
        cycle_end=schedule.cycle_length,
    )
    model.train()
    for step in range(schedule.total_steps):
        images, labels, task = sampler.batch(step)
        task_logits, _ = model(images)
        loss = F.binary_cross_entropy_with_logits(task_logits, labels)
        if variant == "with_selfsup":
            rb = make_rotation_batch(images, Source.REAL)
            _, rot_logits = model(rb.images)
            loss = loss - selfsup_weight * L.rotation_term(rot_logits, rb.labels)
        if not torch.isfinite(loss):
            break  # divergence: return the partial trace
        opt.zero_grad()
        loss.backward()
        opt.step()

        t = step + 1
        if t % eval_every == 0:
            current = schedule.task_at(t - 1)
            pool_x, pool_y = sampler.eval_pool(current)
            model.eval()
            with torch.no_grad():
                acc = float(((model(pool_x)[0] > 0).float() == pool_y).float().mean())
            model.train()
            trace.steps.append(t)
            trace.accuracies.append(acc)
            trace.task_ids.append(current)
            if not quiet and t % 1000 == 0:
                print(f"[forgetting/{variant} seed={seed}] step {t} task {current} acc {acc:.3f}")
    return trace


def post_switch_means(trace: AccuracyTrace, schedule: TaskSchedule, window: int = 100):
    """Mean accuracy in the ``window`` updates following each task switch."""
    return [trace.window_mean(s, s + window) for s in schedule.switch_steps]


def final_task_mean(trace: AccuracyTrace, schedule: TaskSchedule) -> float:
    """Mean accuracy over the last task segment of the first cycle."""
    hi = schedule.cycle_length
    lo = hi - schedule.steps_per_task
    return trace.window_mean(lo, hi)
