"""Adversarial distillation of the base denoiser into a 4-step student.

The critic reuses the teacher's frozen downsample trunk as a feature
extractor and adds one trainable head per resolution-downsample level; each
head cross-attends over the text embedding and emits a scalar.  Losses are
Wasserstein with a gradient penalty on real/fake interpolates, and the
generator objective is exactly two terms: the adversarial score plus an MSE
match to the teacher's multi-step denoised estimate (no other regularizer).
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import EncoderSpec
from .diffusion import SampleTrace, forward_sample, noise_to_step, predict_x0, reverse_trajectory, sampler_step
from .errors import ConfigError, DivergenceError, ShapeError
from .pipeline import Pipeline, model_time
from .schedule import NoiseSchedule, student_schedule
from .unet import CrossAttention2d, UNet, _norm_groups


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Head layout; the trunk always comes frozen from the teacher."""

    context_dim: int = 64
    attn_heads: int = 2
    expected_levels: Optional[int] = None  # validated against the teacher when set


@dataclass
class DistillConfig:
    student_steps: int = 4
    lr_discriminator: float = 1e-3
    lr_generator: float = 1e-5
    gp_weight: float = 10.0
    teacher_match_weight: float = 1.0
    teacher_rollout_steps: int = 4
    divergence_threshold: float = 1e6
    divergence_patience: int = 10

    def __post_init__(self):
        if self.gp_weight <= 0:
            raise ConfigError(f"gp_weight must be > 0, got {self.gp_weight}")
        if self.teacher_match_weight < 0:
            raise ConfigError(f"teacher_match_weight must be >= 0, got {self.teacher_match_weight}")


class _CriticHead(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cross_attn = CrossAttention2d(channels, context_dim, heads)
        self.norm2 = nn.GroupNorm(_norm_groups(channels), channels)
        self.fc = nn.Linear(channels, 1)

    def forward(self, feat, ctx, mask):
        h = self.conv(F.silu(self.norm1(feat)))
        h = self.cross_attn(h, ctx, mask)
        h = F.silu(self.norm2(h)).mean(dim=(2, 3))
        return self.fc(h)[:, 0]


class Discriminator(nn.Module):
    """Critic: frozen teacher trunk + one trainable head per downsample level."""

    def __init__(self, trunk: UNet, spec: DiscriminatorSpec):
        super().__init__()
        self.trunk = trunk
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        n_down = len(trunk.config.level_multipliers) - 1
        if spec.expected_levels is not None and spec.expected_levels != n_down:
            raise ConfigError(
                f"head/level mismatch: spec expects {spec.expected_levels} heads, "
                f"teacher has {n_down} downsample levels"
            )
        channels = trunk.config.level_channels
        self.heads = nn.ModuleList(
            [_CriticHead(channels[i], spec.context_dim, spec.attn_heads)
             for i in range(n_down)]
        )
        self._trunk_sched = None

    def forward(self, x, t, context=None):
        tokens, mask = self.trunk._unpack_context(context, x.shape[0], x.device, x.dtype)
        feats = self.trunk.down_features(x, t, context)
        if len(feats) != len(self.heads):
            raise ConfigError(
                f"head/level mismatch: {len(self.heads)} heads vs {len(feats)} features"
            )
        score = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for head, feat in zip(self.heads, feats):
            score = score + head(feat, tokens, mask)
        return score

    def trunk_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.trunk.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def trainable_parameters(self):
        return self.heads.parameters()


def build_discriminator(teacher: UNet, spec: DiscriminatorSpec) -> Discriminator:
    """Deep-copy the teacher as the frozen trunk and attach fresh heads."""
    if spec.context_dim != teacher.config.context_dim:
        raise ConfigError(
            f"discriminator context_dim {spec.context_dim} != teacher context_dim "
            f"{teacher.config.context_dim}"
        )
    return Discriminator(copy.deepcopy(teacher), spec)


# -- losses ---------------------------------------------------------------------


def adversarial_losses(
    critic: Callable,
    real: torch.Tensor,
    fake: torch.Tensor,
    ctx=None,
    t=None,
    gp_weight: float = 10.0,
    rng: Optional[torch.Generator] = None,
):
    """Wasserstein critic/generator losses with gradient penalty.

    loss_D = mean D(fake) - mean D(real) + gp_weight * gp
    loss_G = -mean D(fake)        (fake keeps generator gradients)
    gp     = mean over uniform interpolates of (||grad_x D(x_hat)||_2 - 1)^2
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real shape {tuple(real.shape)} != fake shape {tuple(fake.shape)}")

    def score(x):
        return critic(x) if ctx is None and t is None else critic(x, t, ctx)

    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(rng or 0)
    u = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=gen, dtype=real.dtype)
    x_hat = (u * real.detach() + (1.0 - u) * fake.detach()).requires_grad_(True)
    s_hat = score(x_hat)
    if s_hat.requires_grad:
        (grads,) = torch.autograd.grad(s_hat.sum(), x_hat, create_graph=True, allow_unused=True)
    else:
        grads = None
    if grads is None:
        grad_norm = torch.zeros(real.shape[0], dtype=real.dtype)
    else:
        grad_norm = grads.flatten(1).norm(dim=1)
    gp = ((grad_norm - 1.0) ** 2).mean()

    loss_d = score(fake.detach()).mean() - score(real).mean() + gp_weight * gp
    loss_g = -score(fake).mean()
    for name, value in (("loss_D", loss_d), ("loss_G", loss_g), ("gp", gp)):
        if not torch.isfinite(value.detach()).all():
            raise DivergenceError(f"non-finite {name} in adversarial losses")
    return loss_d, loss_g, gp


def generator_loss_terms(
    critic_score_fake: torch.Tensor,
    fake: torch.Tensor,
    teacher_target: torch.Tensor,
    teacher_match_weight: float,
) -> dict:
    """The generator objective's exact term registry: two terms, nothing else."""
    return {
        "adversarial": -critic_score_fake.mean(),
        "teacher_match": teacher_match_weight * F.mse_loss(fake, teacher_target),
    }


def teacher_denoise_target(
    teacher: UNet,
    x_s: torch.Tensor,
    s: int,
    student_sched: NoiseSchedule,
    teacher_sched: NoiseSchedule,
    ctx,
    rollout_steps: int = 4,
) -> torch.Tensor:
    """Teacher's multi-step deterministic denoise from the student's noise level."""
    abar_s = student_sched.alpha_bar_at(s)
    j = int(np.argmin(np.abs(teacher_sched.alpha_bar - abar_s)))
    ts = sorted({int(round(v)) for v in np.linspace(j, 0, min(rollout_steps, j + 1))}, reverse=True)
    with torch.no_grad():
        x = x_s
        for t, t_prev in zip(ts, ts[1:] + [-1]):
            eps = teacher(x, model_time(teacher_sched, t), ctx)
            x = sampler_step(eps, x, t, t_prev, teacher_sched, mode="deterministic")
    return x


class DistillTrainer:
    """Alternating critic/generator updates with asymmetric learning rates."""

    def __init__(
        self,
        student: UNet,
        teacher: UNet,
        disc: Discriminator,
        cfg: DistillConfig,
        student_sched: Optional[NoiseSchedule] = None,
        teacher_sched: Optional[NoiseSchedule] = None,
    ):
        self.student = student
        self.teacher = teacher
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.disc = disc
        self.cfg = cfg
        self.student_sched = student_sched or student_schedule()
        if self.student_sched.T != cfg.student_steps:
            raise ConfigError(
                f"student schedule has {self.student_sched.T} steps, config says {cfg.student_steps}"
            )
        self.teacher_sched = teacher_sched or NoiseSchedule.from_dict(
            {"T": 64, "kind": "linear", "beta_min": 1e-3, "beta_max": 0.15}
        )
        self.opt_g = torch.optim.Adam(self.student.parameters(), lr=cfg.lr_generator)
        self.opt_d = torch.optim.Adam(self.disc.trainable_parameters(), lr=cfg.lr_discriminator)
        self._over_threshold = 0
        self.step_count = 0

    @property
    def applied_lr_ratio(self) -> float:
        return self.opt_d.param_groups[0]["lr"] / self.opt_g.param_groups[0]["lr"]

    def train_step(self, latents: torch.Tensor, ctx, rng: torch.Generator) -> dict:
        cfg = self.cfg
        ssched = self.student_sched
        s = int(torch.randint(0, ssched.T, (1,), generator=rng))
        eps = torch.randn(latents.shape, generator=rng, dtype=latents.dtype)
        x_s = forward_sample(latents, s, eps, ssched)
        tv = model_time(ssched, s)

        eps_hat = self.student(x_s, tv, ctx)
        x0_student = predict_x0(eps_hat, x_s, s, ssched)
        x0_teacher = teacher_denoise_target(
            self.teacher, x_s, s, ssched, self.teacher_sched, ctx, cfg.teacher_rollout_steps
        )

        def critic(x):
            return self.disc(x, tv, ctx)

        # critic update (clean reals; the student estimate is the fake)
        loss_d, _, gp = adversarial_losses(
            critic, latents, x0_student.detach(), gp_weight=cfg.gp_weight, rng=rng
        )
        self.opt_d.zero_grad()
        loss_d.backward()
        grad_d = _grad_norm(self.disc.trainable_parameters())
        self.opt_d.step()

        # generator update: exactly the two documented terms
        terms = generator_loss_terms(
            critic(x0_student), x0_student, x0_teacher, cfg.teacher_match_weight
        )
        loss_g = sum(terms.values())
        self.opt_g.zero_grad()
        loss_g.backward()
        grad_g = _grad_norm(self.student.parameters())
        self.opt_g.step()

        metrics = {
            "step": self.step_count,
            "t_index": s,
            "loss_d": float(loss_d.detach()),
            "loss_g": float(loss_g.detach()),
            "gp": float(gp.detach()),
            "adversarial": float(terms["adversarial"].detach()),
            "teacher_match": float(terms["teacher_match"].detach()),
            "grad_norm_d": grad_d,
            "grad_norm_g": grad_g,
            "lr_d": self.opt_d.param_groups[0]["lr"],
            "lr_g": self.opt_g.param_groups[0]["lr"],
        }
        self.step_count += 1
        self._check_divergence(metrics)
        return metrics

    def _check_divergence(self, metrics: dict) -> None:
        bad = (
            not math.isfinite(metrics["loss_d"])
            or not math.isfinite(metrics["loss_g"])
            or abs(metrics["loss_d"]) > self.cfg.divergence_threshold
            or abs(metrics["loss_g"]) > self.cfg.divergence_threshold
        )
        self._over_threshold = self._over_threshold + 1 if bad else 0
        if self._over_threshold >= self.cfg.divergence_patience:
            raise DivergenceError(
                f"distillation diverged at step {metrics['step']}: "
                f"loss_d={metrics['loss_d']:.3g} loss_g={metrics['loss_g']:.3g} "
                f"over threshold for {self._over_threshold} consecutive steps"
            )


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


# -- few-step inference -----------------------------------------------------------


def student_sample(
    student: UNet,
    prompt: Optional[str],
    seed: int,
    sched: Optional[NoiseSchedule] = None,
    codec=None,
    encoder_spec: Optional[EncoderSpec] = None,
    height: int = 32,
    width: int = 32,
):
    """Generate with the distilled student: one denoiser pass per schedule
    step, no guidance doubling.  Returns (image, trace) with trace.nfe == T."""
    sched = sched or student_schedule()
    from .autoencoder import IdentityCodec

    pipe = Pipeline(student, codec or IdentityCodec(), sched,
                    encoder_spec or EncoderSpec())
    trace = SampleTrace()
    image = pipe.text_to_image(prompt, seed, height, width, guidance_scale=1.0,
                               trace=trace)
    return image, trace


REFINE_NOISE_STEP = 2  # re-noise a finished image to step 2 of the 4-step schedule


def refine(
    base_output: np.ndarray,
    student: UNet,
    sched: Optional[NoiseSchedule] = None,
    seed: int = 0,
    codec=None,
    prompt: Optional[str] = None,
    encoder_spec: Optional[EncoderSpec] = None,
):
    """Polish a base-model image: re-noise to step 2 of 4, then exactly two
    student denoise steps.  Returns (image, trace)."""
    sched = sched or student_schedule()
    if sched.T != 4:
        raise ConfigError(f"refiner expects the 4-step student schedule, got T={sched.T}")
    from .autoencoder import IdentityCodec

    codec = codec or IdentityCodec()
    spec = encoder_spec or EncoderSpec()
    pipe = Pipeline(student, codec, sched, spec)
    trace = SampleTrace()

    gen = torch.Generator().manual_seed(seed)
    z = codec.encode_image(base_output)
    z_k = noise_to_step(z, REFINE_NOISE_STEP, sched, rng=gen)
    trace.record_noise(REFINE_NOISE_STEP)

    guidance = pipe.guidance_for(prompt, None, 1.0)
    eps_fn = pipe._eps_fn(guidance, trace)
    with torch.no_grad():
        z_out = reverse_trajectory(
            z_k, sched, eps_fn, timesteps=[REFINE_NOISE_STEP, REFINE_NOISE_STEP - 1],
            mode="deterministic", rng=gen, trace=trace,
        )
    return codec.decode_image(z_out), trace


# -- evaluation -------------------------------------------------------------------


def rbf_mmd2(x: np.ndarray, y: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Unbiased squared MMD between two feature samples under an RBF kernel."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if bandwidth is None:
        z = np.concatenate([x, y], axis=0)
        d2 = ((z[:, None] - z[None, :]) ** 2).sum(-1)
        med = np.median(d2[np.triu_indices(len(z), 1)])
        bandwidth = math.sqrt(max(med, 1e-12) / 2)

    def k(a, b):
        d2 = ((a[:, None] - b[None, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2 * bandwidth**2))

    m, n = len(x), len(y)
    kxx = (k(x, x).sum() - m) / (m * (m - 1))
    kyy = (k(y, y).sum() - n) / (n * (n - 1))
    kxy = k(x, y).mean()
    return float(kxx + kyy - 2 * kxy)
