"""Image-level generation wrappers around the latent diffusion core."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .conditioning import EncoderSpec, encode_text, null_context
from .diffusion import (
    GuidanceSpec,
    SampleTrace,
    guided_eps_fn,
    noise_to_step,
    reverse_trajectory,
)
from .errors import ConfigError
from .schedule import NoiseSchedule
from .unet import UNet

# Models are conditioned on continuous time scaled into [0, 1000]; the
# student (T=4) and teacher (large T) schedules meet on this axis.
TIME_SCALE = 1000.0


def model_time(sched: NoiseSchedule, t: int) -> float:
    return sched.time_value(t) * TIME_SCALE


@dataclass
class Pipeline:
    """Bundle of everything one generation run needs."""

    unet: UNet
    codec: object
    sched: NoiseSchedule
    encoder_spec: EncoderSpec = field(default_factory=EncoderSpec)

    def _latent_shape(self, height: int, width: int) -> tuple:
        d = self.codec.downscale
        if height % d or width % d:
            raise ConfigError(f"image size {width}x{height} not divisible by codec stride {d}")
        return (1, 4, height // d, width // d)

    def _eps_fn(self, guidance: Optional[GuidanceSpec], trace: Optional[SampleTrace],
                visual_tokens: Optional[torch.Tensor] = None):
        def model_eps(x, t, ctx):
            return self.unet(x, model_time(self.sched, t), ctx, visual_tokens=visual_tokens)

        return guided_eps_fn(model_eps, guidance, null_ctx=null_context(self.encoder_spec),
                             trace=trace)

    def guidance_for(self, prompt: Optional[str], negative_prompt: Optional[str],
                     scale: float) -> Optional[GuidanceSpec]:
        if prompt is None or not prompt.strip():
            positive = null_context(self.encoder_spec)
        else:
            positive = encode_text(self.encoder_spec, prompt)
        negative = (
            encode_text(self.encoder_spec, negative_prompt) if negative_prompt else None
        )
        return GuidanceSpec(scale, positive, negative)

    def text_to_image(
        self,
        prompt: Optional[str],
        seed: int,
        height: int = 32,
        width: int = 32,
        guidance_scale: float = 4.0,
        negative_prompt: Optional[str] = None,
        mode: str = "deterministic",
        timesteps: Optional[Sequence[int]] = None,
        visual_tokens: Optional[torch.Tensor] = None,
        trace: Optional[SampleTrace] = None,
    ) -> np.ndarray:
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(self._latent_shape(height, width), generator=gen)
        guidance = self.guidance_for(prompt, negative_prompt, guidance_scale)
        eps_fn = self._eps_fn(guidance, trace, visual_tokens)
        with torch.no_grad():
            z = reverse_trajectory(x, self.sched, eps_fn, timesteps=timesteps,
                                   mode=mode, rng=gen, trace=trace)
        return self.codec.decode_image(z)

    def image_to_image(
        self,
        image: np.ndarray,
        strength: float,
        seed: int,
        prompt: Optional[str] = None,
        guidance_scale: float = 1.0,
        negative_prompt: Optional[str] = None,
        mode: str = "deterministic",
        trace: Optional[SampleTrace] = None,
    ) -> np.ndarray:
        """Partially re-noise then denoise an existing image.

        strength 0 returns the input unchanged; strength 1 re-noises to the
        deepest schedule step.
        """
        if not 0.0 <= strength <= 1.0:
            raise ConfigError(f"i2i strength must be in [0,1], got {strength}")
        if strength == 0.0:
            return image.copy()
        k = max(0, min(self.sched.T - 1, round(strength * (self.sched.T - 1))))
        gen = torch.Generator().manual_seed(seed)
        z = self.codec.encode_image(image)
        z_k = noise_to_step(z, k, self.sched, rng=gen)
        if trace is not None:
            trace.record_noise(k)
        guidance = self.guidance_for(prompt, negative_prompt, guidance_scale)
        eps_fn = self._eps_fn(guidance, trace)
        with torch.no_grad():
            z_out = reverse_trajectory(z_k, self.sched, eps_fn,
                                       timesteps=list(range(k, -1, -1)),
                                       mode=mode, rng=gen, trace=trace)
        return self.codec.decode_image(z_out)
