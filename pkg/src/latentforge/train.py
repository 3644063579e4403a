"""Training loops: base denoiser, inpainting fine-tune, distillation run.

All loops consume the same JSONL manifest interface (the inpaint fine-tune
adds mask augmentation on the fly rather than a second corpus) and emit
line-delimited metrics records.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import EncoderSpec, TextEncoder, drop_context
from .datapipe import DatasetRecord, load_record_image
from .distill import DistillConfig, DistillTrainer, build_discriminator, DiscriminatorSpec
from .errors import ConfigError, DivergenceError
from .inpaint import expand_input_conv, generate_masks, make_inpaint_input
from .pipeline import TIME_SCALE
from .schedule import NoiseSchedule, make_schedule, student_schedule
from .unet import UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 50


class MetricsLogger:
    """Line-delimited JSON metrics; no-op when path is None."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


class _LatentDataset:
    """Pre-encoded latents + per-caption contexts for fast toy training."""

    def __init__(self, records: list, root: Path, codec, encoder: TextEncoder):
        if not records:
            raise ConfigError("empty training manifest")
        images = np.stack([load_record_image(r, root) for r in records])
        with torch.no_grad():
            tens = torch.from_numpy(images.transpose(0, 3, 1, 2)).float()
            self.latents = codec.encode(tens)
        self.captions = [r.caption for r in records]
        self.context = encoder.encode_batch(self.captions)

    def batch(self, idx: np.ndarray):
        from .conditioning import ContextEmbedding

        return self.latents[idx], ContextEmbedding(self.context.tokens[idx],
                                                   self.context.mask[idx])


def _batched_forward_sample(x0: torch.Tensor, t: np.ndarray, eps: torch.Tensor,
                            sched: NoiseSchedule) -> torch.Tensor:
    abar = torch.from_numpy(sched.alpha_bar[t]).float()[:, None, None, None]
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def _time_values(t: np.ndarray, sched: NoiseSchedule) -> torch.Tensor:
    return torch.from_numpy(sched.timestep_values[t] * TIME_SCALE).float()


def train_base(
    records: list,
    root: Path,
    unet_cfg: UNetConfig,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    codec,
    encoder_spec: EncoderSpec,
    metrics: Optional[MetricsLogger] = None,
    model: Optional[UNet] = None,
) -> UNet:
    """Epsilon-prediction training of the base denoiser."""
    metrics = metrics or MetricsLogger()
    encoder = TextEncoder(encoder_spec)
    data = _LatentDataset(records, root, codec, encoder)
    model = model if model is not None else build_unet(unet_cfg, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data.latents), size=cfg.batch_size)
        x0, ctx = data.batch(idx)
        ctx = drop_context(ctx, cfg.cond_dropout, rng_seed=int(rng.integers(0, 2**31)))
        t = rng.integers(0, sched.T, size=cfg.batch_size)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = _batched_forward_sample(x0, t, eps, sched)
        pred = model(x_t, _time_values(t, sched), ctx)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(float(loss)):
            raise DivergenceError(f"base training loss non-finite at step {step}")
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            metrics.write({"step": step, "loss": float(loss)})
            log.debug("base step %d loss %.4f", step, float(loss))
    model.eval()
    return model


def finetune_inpaint(
    base: UNet,
    records: list,
    root: Path,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    codec,
    encoder_spec: EncoderSpec,
    metrics: Optional[MetricsLogger] = None,
) -> UNet:
    """Channel surgery then fine-tuning with generated mask augmentation.

    Consumes the same manifest as the base trainer; masks are drawn per
    sample (up to 3 per image across a run) rather than from a second corpus.
    """
    metrics = metrics or MetricsLogger()
    encoder = TextEncoder(encoder_spec)
    data = _LatentDataset(records, root, codec, encoder)
    model = expand_input_conv(base)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    h, w = data.latents.shape[2:]

    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data.latents), size=cfg.batch_size)
        x0, ctx = data.batch(idx)
        ctx = drop_context(ctx, cfg.cond_dropout, rng_seed=int(rng.integers(0, 2**31)))
        masks = np.stack([
            generate_masks((h, w), count=1 + int(rng.integers(0, 3)),
                           seed=int(rng.integers(0, 2**31))).masks[0]
            for _ in range(cfg.batch_size)
        ])
        m = torch.from_numpy(masks.astype(np.float32))[:, None]
        t = rng.integers(0, sched.T, size=cfg.batch_size)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = _batched_forward_sample(x0, t, eps, sched)
        pred = model(make_inpaint_input(x_t, x0, m), _time_values(t, sched), ctx)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(float(loss)):
            raise DivergenceError(f"inpaint fine-tune loss non-finite at step {step}")
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            metrics.write({"step": step, "loss": float(loss)})
    model.eval()
    return model


def curated_slice(records: list, fraction: float = 0.1, key: str = "aesthetic") -> list:
    """Top-scoring slice of the manifest (the distillation training set)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0,1], got {fraction}")
    scored = [r for r in records if key in r.scores]
    if not scored:
        raise ConfigError(f"no records carry a {key!r} score")
    scored.sort(key=lambda r: (-r.scores[key], r.id))
    n = max(1, round(len(scored) * fraction))
    return scored[:n]


def distill_run(
    teacher: UNet,
    records: list,
    root: Path,
    cfg: DistillConfig,
    steps: int,
    codec,
    encoder_spec: EncoderSpec,
    batch_size: int = 8,
    seed: int = 0,
    teacher_sched: Optional[NoiseSchedule] = None,
    metrics: Optional[MetricsLogger] = None,
):
    """Distill the teacher into a 4-step student; returns (student, trainer)."""
    metrics = metrics or MetricsLogger()
    encoder = TextEncoder(encoder_spec)
    data = _LatentDataset(records, root, codec, encoder)
    student = copy.deepcopy(teacher)
    for p in student.parameters():
        p.requires_grad_(True)
    disc = build_discriminator(
        teacher, DiscriminatorSpec(context_dim=teacher.config.context_dim,
                                   attn_heads=teacher.config.heads)
    )
    trainer = DistillTrainer(student, teacher, disc, cfg,
                             student_sched=student_schedule(),
                             teacher_sched=teacher_sched)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    student.train()
    for _ in range(steps):
        idx = rng.integers(0, len(data.latents), size=min(batch_size, len(data.latents)))
        x0, ctx = data.batch(idx)
        m = trainer.train_step(x0, ctx, gen)
        if m["step"] % 25 == 0 or m["step"] == steps - 1:
            metrics.write(m)
    student.eval()
    return student, trainer
