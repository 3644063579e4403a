"""Forward diffusion, reverse samplers and classifier-free guidance.

Latents are rank-4 float tensors (batch, channels, height, width).  Every
stochastic operation takes an explicit seed or ``torch.Generator``; nothing
here touches global RNG state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import torch

from .errors import ShapeError, StepOrderError, StepRangeError
from .schedule import NoiseSchedule

Rng = Union[int, torch.Generator, None]


def _as_generator(rng: Rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    gen = torch.Generator(device="cpu")
    gen.manual_seed(0 if rng is None else int(rng))
    return gen


def _check_latent(x: torch.Tensor, name: str = "latent") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be rank-4 (B,C,H,W), got shape {tuple(x.shape)}")


@dataclass
class GuidanceSpec:
    """Classifier-free guidance configuration.

    ``negative_context`` replaces the unconditional branch when given; at
    scale 1 guidance reduces to the positive branch exactly.
    """

    scale: float
    positive_context: object
    negative_context: object = None

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")


@dataclass
class SampleTrace:
    """Step log for one generation: denoiser-call count plus event labels."""

    events: list = field(default_factory=list)
    nfe: int = 0

    def record_noise(self, k: int) -> None:
        self.events.append(f"noise@{k}")

    def record_denoise(self, t: int, t_prev: int) -> None:
        # The final collapse step (t_prev = -1) is labelled with target 0.
        self.events.append(f"denoise {t}→{max(t_prev, 0)}")

    def count_eval(self, n: int = 1) -> None:
        self.nfe += n


def forward_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Diffuse x0 to step t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_latent(x0, "x0")
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = sched.alpha_bar_at(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond), exact at scale 0 and 1."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(
            f"guidance branches disagree: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    if scale == 1.0:
        return eps_cond.clone()
    if scale == 0.0:
        return eps_uncond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def predict_x0(eps_pred: torch.Tensor, x_t: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward marginal: (x_t - sqrt(1-abar_t)*eps) / sqrt(abar_t)."""
    abar = sched.alpha_bar_at(t)
    return (x_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def sampler_step(
    eps_pred: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    mode: str = "deterministic",
    rng: Rng = None,
) -> torch.Tensor:
    """One reverse step from index t to t_prev.

    t_prev = -1 collapses to the x0 estimate implied by eps_pred (the final
    step adds no noise).  Deterministic mode is DDIM-style and a pure
    function of its inputs; ancestral mode draws its noise from ``rng``.
    """
    if eps_pred.shape != x_t.shape:
        raise ShapeError(f"eps shape {tuple(eps_pred.shape)} != x_t shape {tuple(x_t.shape)}")
    if not (t > t_prev >= -1):
        raise StepOrderError(f"require t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    if mode not in ("deterministic", "ancestral"):
        raise ValueError(f"unknown sampler mode {mode!r}")

    x0_hat = predict_x0(eps_pred, x_t, t, sched)
    if t_prev == -1:
        return x0_hat

    abar_t = sched.alpha_bar_at(t)
    abar_prev = sched.alpha_bar_at(t_prev)
    if mode == "deterministic":
        return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_pred

    # Ancestral: DDIM eta=1 posterior generalized to arbitrary step pairs.
    var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev)
    dir_coef = math.sqrt(max(1.0 - abar_prev - var, 0.0))
    gen = _as_generator(rng)
    z = torch.randn(x_t.shape, generator=gen, dtype=x_t.dtype)
    return math.sqrt(abar_prev) * x0_hat + dir_coef * eps_pred + math.sqrt(var) * z


def noise_to_step(x0: torch.Tensor, k: int, sched: NoiseSchedule, rng: Rng = None) -> torch.Tensor:
    """Re-noise a clean latent to schedule step k (refiner entry point)."""
    if not 0 <= k < sched.T:
        raise StepRangeError(f"step {k} outside schedule of length {sched.T}")
    gen = _as_generator(rng)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return forward_sample(x0, k, eps, sched)


DenoiseFn = Callable[[torch.Tensor, float], torch.Tensor]
"""Callable mapping (x_t, time_value) -> epsilon prediction for one context."""


def reverse_trajectory(
    x_start: torch.Tensor,
    sched: NoiseSchedule,
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    timesteps: Optional[Sequence[int]] = None,
    mode: str = "deterministic",
    rng: Rng = None,
    trace: Optional[SampleTrace] = None,
) -> torch.Tensor:
    """Run the reverse process over ``timesteps`` (default: T-1 .. 0).

    ``eps_fn(x, t)`` supplies the noise prediction (guidance already folded
    in); the trajectory ends with the x0-estimate collapse step.
    """
    ts = list(range(sched.T - 1, -1, -1)) if timesteps is None else list(timesteps)
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise StepOrderError(f"timesteps must be strictly decreasing, got {ts}")
    gen = _as_generator(rng)
    x = x_start
    pairs = list(zip(ts, ts[1:] + [-1]))
    for t, t_prev in pairs:
        eps = eps_fn(x, t)
        x = sampler_step(eps, x, t, t_prev, sched, mode=mode, rng=gen)
        if trace is not None:
            trace.record_denoise(t, t_prev)
    return x


def guided_eps_fn(
    model_eps: Callable[[torch.Tensor, int, object], torch.Tensor],
    guidance: Optional[GuidanceSpec],
    null_ctx: object = None,
    trace: Optional[SampleTrace] = None,
) -> Callable[[torch.Tensor, int], torch.Tensor]:
    """Wrap a context-conditioned denoiser into a plain eps_fn.

    With ``guidance=None`` (or scale exactly 1 and no negative context) the
    model is evaluated once per step; otherwise twice (negative branch
    defaults to the null context).
    """

    def eps_fn(x: torch.Tensor, t: int) -> torch.Tensor:
        if guidance is None:
            if trace is not None:
                trace.count_eval()
            return model_eps(x, t, null_ctx)
        negative = guidance.negative_context if guidance.negative_context is not None else null_ctx
        if guidance.scale == 1.0 and guidance.negative_context is None:
            if trace is not None:
                trace.count_eval()
            return model_eps(x, t, guidance.positive_context)
        eps_cond = model_eps(x, t, guidance.positive_context)
        eps_uncond = model_eps(x, t, negative)
        if trace is not None:
            trace.count_eval(2)
        return cfg_combine(eps_uncond, eps_cond, guidance.scale)

    return eps_fn
