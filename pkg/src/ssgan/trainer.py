"""Alternating SGD training of (generator, discriminator) with Adam.

Each training step runs ``disc_iters`` discriminator updates -- source loss
on the real batch plus a fresh fake batch, the rotation term on the real
quarter-batch for self-supervised variants, and the configured regularizer
-- followed by one generator update (source term plus the rotation term on
a fake quarter-batch). The step counter advances once per generator update.

Determinism contract: a run is a pure function of (config, dataset, seed).
All noise flows through one explicit torch.Generator whose state is saved in
checkpoints; batch order is random-access by global step, so resuming from a
checkpoint continues bit-identically. Evaluation noise is derived from
(seed, step) and never touches the training generator.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import SsGANConfig, config_to_dict
from .data import BatchStream, Dataset
from .features import FeatureExtractor, get_or_train_extractor
from .metrics import embed_images, frechet_distance, gaussian_stats
from .models import build_models, config_hash, load_checkpoint, save_checkpoint
from .rotation import Source, make_rotation_batch


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class StepMetrics:
    step: int
    d_loss: float
    g_loss: float
    rotation_accuracy: float | None = None


@dataclass
class TrainState:
    """Everything that evolves during training; fully serializable."""

    config: SsGANConfig
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    noise_rng: torch.Generator
    step: int = 0
    data_index: int = 0

    def state_dict(self) -> dict:
        return {
            "manifest": {
                "variant": self.config.variant,
                "step": self.step,
                "seed": self.config.seed,
                "config_hash": config_hash(self.config),
                "config": config_to_dict(self.config),
            },
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "noise_rng": self.noise_rng.get_state(),
            "step": self.step,
            "data_index": self.data_index,
        }

    def load_state_dict(self, payload: dict):
        self.generator.load_state_dict(payload["generator"])
        self.discriminator.load_state_dict(payload["discriminator"])
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_d.load_state_dict(payload["opt_d"])
        self.noise_rng.set_state(payload["noise_rng"])
        self.step = payload["step"]
        self.data_index = payload["data_index"]


def make_train_state(config: SsGANConfig) -> TrainState:
    gen, disc = build_models(config)
    betas = (config.adam.beta1, config.adam.beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.adam.lr, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.adam.lr, betas=betas)
    noise_rng = torch.Generator().manual_seed(int(config.seed) * 7919 + 1)
    return TrainState(
        config=config,
        generator=gen,
        discriminator=disc,
        opt_g=opt_g,
        opt_d=opt_d,
        noise_rng=noise_rng,
    )


def _sample_latent(state: TrainState, n: int) -> torch.Tensor:
    return state.generator.latent.sample(n, generator=state.noise_rng)


def _sample_fake_labels(state: TrainState, n: int) -> torch.Tensor | None:
    if state.config.variant != "pcgan":
        return None
    return torch.randint(
        0, state.config.num_classes, (n,), generator=state.noise_rng, dtype=torch.int64
    )


def _check_finite(loss: torch.Tensor, state: TrainState, context: str):
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite {context} loss at step {state.step + 1}",
            diagnostics={
                "context": context,
                "step": state.step + 1,
                "loss": float(loss.detach()),
                "variant": state.config.variant,
            },
        )


def train_step(
    state: TrainState, real_batch: torch.Tensor, labels: torch.Tensor | None = None
) -> tuple[TrainState, StepMetrics]:
    """One alternating step: disc_iters discriminator updates, one generator update."""
    cfg = state.config
    weights = cfg.weights
    if cfg.variant == "pcgan" and labels is None:
        raise L.ConfigError("pcgan training needs labels with every batch")
    if cfg.uses_rotation and real_batch.shape[0] % 4 != 0:
        raise ValueError(
            f"rotation variants need batch size divisible by 4, got {real_batch.shape[0]}"
        )
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()
    n = real_batch.shape[0]

    d_loss_val = 0.0
    rot_acc = None
    for _ in range(cfg.disc_iters):
        z = _sample_latent(state, n)
        fake_labels = _sample_fake_labels(state, n)
        with torch.no_grad():
            fake = gen(z, fake_labels)
        d_real = disc(real_batch, labels)
        d_fake = disc(fake, fake_labels)
        rot_logits = rot_labels = None
        # skipped entirely at weight zero so the ablated variant runs the exact
        # same forward passes (and spectral-norm updates) as the baseline
        if cfg.uses_rotation and weights.beta != 0:
            rb = make_rotation_batch(real_batch, Source.REAL)
            rot_logits = disc(rb.images).rotation
            rot_labels = rb.labels
            with torch.no_grad():
                rot_acc = float((rot_logits.argmax(dim=1) == rot_labels).float().mean())
        loss_d = L.discriminator_loss(
            d_real.source, d_fake.source, rot_logits, rot_labels, weights, cfg.loss_type
        )
        if cfg.regularizer == "gradient_penalty":
            norms = L.interpolate_grad_norms(disc, real_batch, fake, generator=state.noise_rng)
            loss_d = loss_d + L.gradient_penalty(norms, weights.gp_lambda)
        _check_finite(loss_d, state, "discriminator")
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        d_loss_val = float(loss_d.detach())

    z = _sample_latent(state, n)
    fake_labels = _sample_fake_labels(state, n)
    fake = gen(z, fake_labels)
    g_out = disc(fake, fake_labels)
    rot_logits = rot_labels = None
    if cfg.uses_rotation and weights.alpha != 0:
        rb = make_rotation_batch(fake, Source.FAKE)
        rot_logits = disc(rb.images).rotation
        rot_labels = rb.labels
    loss_g = L.generator_loss(g_out.source, rot_logits, rot_labels, weights, cfg.loss_type)
    _check_finite(loss_g, state, "generator")
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()  # D also receives gradients here; they are cleared, never applied
    state.opt_g.step()

    state.step += 1
    return state, StepMetrics(
        step=state.step,
        d_loss=d_loss_val,
        g_loss=float(loss_g.detach()),
        rotation_accuracy=rot_acc,
    )


# ---------------------------------------------------------------------------
# Sampling and evaluation helpers
# ---------------------------------------------------------------------------


def generate_samples(state: TrainState, n: int, eval_seed: int) -> torch.Tensor:
    """Sample n images from derived (not training) noise; deterministic per (seed, step)."""
    rng = torch.Generator().manual_seed(eval_seed)
    cfg = state.config
    gen = state.generator
    gen.train()  # batch-statistic normalization; no running averages exist
    chunks = []
    with torch.no_grad():
        remaining = n
        while remaining > 0:
            b = min(cfg.eval_batch, remaining)
            if b < 2:
                b = 2  # batch statistics need at least two samples
            z = gen.latent.sample(b, generator=rng)
            y = None
            if cfg.variant == "pcgan":
                y = torch.randint(0, cfg.num_classes, (b,), generator=rng, dtype=torch.int64)
            chunks.append(gen(z, y))
            remaining -= b
    return torch.cat(chunks, dim=0)[:n]


def save_image_grid(images: torch.Tensor, path, nrow: int = 8):
    """Write a [-1,1] NCHW image batch as one PNG grid."""
    from PIL import Image

    arr = ((images.detach().cpu().numpy() + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    n, c, h, w = arr.shape
    ncol = (n + nrow - 1) // nrow
    canvas = np.zeros((ncol * h, nrow * w, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, nrow)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = arr[i].transpose(1, 2, 0)
    Image.fromarray(canvas.squeeze()).save(path)


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    """Persisted output of one training run."""

    config: dict
    run_dir: str
    status: str = "completed"  # completed | diverged
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    final_fid: float | None = None
    best_fid: float | None = None
    wallclock: dict = field(default_factory=dict)

    def append_metric(self, step: int, metric: str, value: float, log_file=None):
        row = {"step": step, "metric": metric, "value": value}
        self.metrics.append(row)
        if log_file is not None:
            log_file.write(json.dumps(row) + "\n")
            log_file.flush()

    def series(self, metric: str) -> list[tuple[int, float]]:
        return [(r["step"], r["value"]) for r in self.metrics if r["metric"] == metric]

    def save(self):
        path = Path(self.run_dir) / "run_record.json"
        payload = {
            "config": self.config,
            "run_dir": self.run_dir,
            "status": self.status,
            "checkpoints": self.checkpoints,
            "final_fid": self.final_fid,
            "best_fid": self.best_fid,
            "wallclock": self.wallclock,
            "metrics": self.metrics,
        }
        path.write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        payload = json.loads((Path(run_dir) / "run_record.json").read_text())
        return cls(**payload)


def _checkpoint_state(state: TrainState, run_dir: Path) -> str:
    path = run_dir / "checkpoints" / f"step_{state.step:08d}.pt"
    sd = state.state_dict()
    save_checkpoint(
        path,
        state.generator,
        state.discriminator,
        sd["manifest"],
        extra={k: sd[k] for k in ("opt_g", "opt_d", "noise_rng", "step", "data_index")},
    )
    return str(path)


def restore_train_state(config: SsGANConfig, checkpoint_path) -> TrainState:
    """Rebuild a TrainState from a checkpoint written by train()."""
    state = make_train_state(config)
    payload = load_checkpoint(checkpoint_path)
    own_hash = config_hash(config)
    ck_hash = payload["manifest"]["config_hash"]
    if ck_hash != own_hash:
        raise L.ConfigError(
            f"checkpoint config hash {ck_hash} does not match current config {own_hash}"
        )
    state.load_state_dict(payload)
    return state


def train(
    config: SsGANConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    run_dir=None,
    extractor: FeatureExtractor | None = None,
    resume_from=None,
    quiet: bool = True,
) -> RunRecord:
    """Run a full training job: steps, periodic FID, checkpoints, sample grids.

    Real-side FID statistics come from ``eval_dataset`` (the held-out test
    split); it defaults to ``dataset`` only when no split is available.
    Returns the RunRecord; a diverged run is recorded as such, not raised.
    """
    run_dir = Path(run_dir) if run_dir is not None else Path("runs") / _default_run_name(config)
    try:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "samples").mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write_probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as e:
        raise OSError(f"run directory {run_dir} is not writable: {e}") from e

    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    if extractor is None:
        extractor = get_or_train_extractor(dataset, run_dir.parent / "extractors")

    snapshot = {
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "dataset": {"name": dataset.name, "hash": dataset.version_hash, "n": len(dataset)},
        "eval_dataset": {
            "name": eval_dataset.name,
            "hash": eval_dataset.version_hash,
            "n": len(eval_dataset),
        },
        "extractor_hash": extractor.content_hash,
    }
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2))

    record = RunRecord(config=config_to_dict(config), run_dir=str(run_dir))
    started = time.time()

    if resume_from is not None:
        state = restore_train_state(config, resume_from)
    else:
        state = make_train_state(config)

    stream = BatchStream(dataset, config.batch_size, config.seed)
    n_eval = min(config.eval_samples, len(eval_dataset))
    real_eval_stats = gaussian_stats(embed_images(eval_dataset.images[:n_eval], extractor))

    if state.step == 0:
        record.checkpoints.append(_checkpoint_state(state, run_dir))

    log_file = open(run_dir / "metrics.jsonl", "a")
    first_fid = None
    bad_evals = 0
    try:
        while state.step < config.total_steps:
            real, labels = stream.batch_at(state.data_index)
            state.data_index += 1
            try:
                state, metrics = train_step(state, real, labels)
            except TrainingDiverged as e:
                (run_dir / "diagnostics.json").write_text(json.dumps(e.diagnostics, indent=2))
                record.status = "diverged"
                break

            t = state.step
            if t % config.log_interval == 0 or t == config.total_steps:
                record.append_metric(t, "d_loss", metrics.d_loss, log_file)
                record.append_metric(t, "g_loss", metrics.g_loss, log_file)
                if metrics.rotation_accuracy is not None:
                    record.append_metric(
                        t, "rotation_accuracy", metrics.rotation_accuracy, log_file
                    )

            if t % config.eval_interval == 0 or t == config.total_steps:
                fakes = generate_samples(state, n_eval, eval_seed=config.seed * 100003 + t)
                fake_stats = gaussian_stats(embed_images(fakes, extractor))
                fid = frechet_distance(real_eval_stats, fake_stats)
                record.append_metric(t, "fid", fid, log_file)
                record.append_metric(t, "fid_n_real", float(n_eval), log_file)
                record.append_metric(t, "fid_n_fake", float(n_eval), log_file)
                save_image_grid(
                    fakes[: config.sample_grid], run_dir / "samples" / f"step_{t:08d}.png"
                )
                if not quiet:
                    print(f"[{run_dir.name}] step {t}: fid={fid:.3f}")
                if first_fid is None:
                    first_fid = fid
                diverged_now = (not np.isfinite(fid)) or (fid > 10.0 * first_fid)
                bad_evals = bad_evals + 1 if diverged_now else 0
                if bad_evals >= 3:
                    record.status = "diverged"
                    record.append_metric(t, "diverged", 1.0, log_file)
                    break

            if t % config.checkpoint_interval == 0 or t == config.total_steps:
                record.checkpoints.append(_checkpoint_state(state, run_dir))
    finally:
        log_file.close()

    fids = record.series("fid")
    if fids:
        record.final_fid = fids[-1][1]
        record.best_fid = min(v for _, v in fids)
    record.wallclock = {"started": started, "finished": time.time()}
    record.save()
    return record


def _default_run_name(config: SsGANConfig) -> str:
    return f"{config.dataset}_{config.variant}_seed{config.seed}_{config_hash(config)}"


def run_seeds(
    config: SsGANConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None,
    seeds,
    run_root,
    extractor=None,
    quiet: bool = True,
) -> list[RunRecord]:
    """Train one config under several seeds (mean-curve / best-of protocol)."""
    import dataclasses

    records = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=int(seed))
        run_dir = Path(run_root) / _default_run_name(cfg)
        records.append(
            train(cfg, dataset, eval_dataset, run_dir=run_dir, extractor=extractor, quiet=quiet)
        )
    return records


def best_final_fid(records: list[RunRecord]) -> tuple[RunRecord | None, float]:
    """Best (lowest) final FID across seeds; diverged runs are excluded."""
    finished = [r for r in records if r.status == "completed" and r.final_fid is not None]
    if not finished:
        return None, float("nan")
    best = min(finished, key=lambda r: r.final_fid)
    return best, best.final_fid
