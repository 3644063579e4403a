"""In/outpainting: channel surgery, random mask generation, canvas growth.

Channel convention (golden-tested): the 9-channel input is
``[noisy latent (4) | clean image latent with masked region zeroed (4) |
mask (1)]`` where mask = 1 marks pixels TO FILL.  The extra input-conv
weights start at exactly zero, so a freshly expanded model reproduces the
base model bit-for-bit up to float addition of zero contributions.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .conditioning import EncoderSpec, encode_text, null_context
from .diffusion import (
    GuidanceSpec,
    SampleTrace,
    forward_sample,
    guided_eps_fn,
    sampler_step,
)
from .errors import ConfigError, ShapeError, UsageError
from .schedule import NoiseSchedule
from .unet import UNet

log = logging.getLogger(__name__)

MASK_KINDS = ("rectangular", "circle", "stroke", "arbitrary")

MIN_COVER = 0.01
MAX_COVER = 0.99


@dataclass(frozen=True)
class MaskSpec:
    """Parametric mask: kind plus a seed that fixes its geometry."""

    kind: str
    seed: int

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ConfigError(f"mask kind must be one of {MASK_KINDS}, got {self.kind!r}")

    def render(self, shape: tuple) -> np.ndarray:
        """Binary (H,W) mask covering between 1% and 99% of the canvas."""
        h, w = shape
        rng = np.random.default_rng([self.seed, MASK_KINDS.index(self.kind)])
        for _ in range(100):
            mask = _draw(self.kind, h, w, rng)
            cover = mask.mean()
            if MIN_COVER <= cover <= MAX_COVER:
                return mask
        raise ConfigError(
            f"mask {self.kind}/{self.seed} degenerate after 100 attempts on shape {shape}"
        )


@dataclass
class MaskSet:
    masks: list
    specs: list


def _disk(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _draw(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "rectangular":
        y0 = rng.integers(0, h)
        x0 = rng.integers(0, w)
        hh = rng.integers(max(1, h // 8), h)
        ww = rng.integers(max(1, w // 8), w)
        mask = np.zeros((h, w), dtype=bool)
        mask[y0:min(h, y0 + hh), x0:min(w, x0 + ww)] = True
        return mask
    if kind == "circle":
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        r = rng.uniform(min(h, w) / 8, min(h, w) / 2)
        return _disk(h, w, cy, cx, r)
    if kind == "stroke":
        mask = np.zeros((h, w), dtype=bool)
        y, x = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.0, min(h, w) / 8)
        for _ in range(rng.integers(3, 8)):
            ang = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(min(h, w) / 8, min(h, w) / 2)
            steps = max(2, int(length))
            for s in range(steps):
                yy = np.clip(y + np.sin(ang) * length * s / steps, 0, h - 1)
                xx = np.clip(x + np.cos(ang) * length * s / steps, 0, w - 1)
                mask |= _disk(h, w, yy, xx, r)
            y = float(np.clip(y + np.sin(ang) * length, 0, h - 1))
            x = float(np.clip(x + np.cos(ang) * length, 0, w - 1))
        return mask
    # arbitrary: random-walk brush with varying radius
    mask = np.zeros((h, w), dtype=bool)
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    for _ in range(rng.integers(20, 60)):
        r = rng.uniform(1.0, min(h, w) / 6)
        mask |= _disk(h, w, y, x, r)
        y = float(np.clip(y + rng.normal(0, h / 10), 0, h - 1))
        x = float(np.clip(x + rng.normal(0, w / 10), 0, w - 1))
    return mask


def generate_masks(shape: tuple, count: int, seed: int) -> MaskSet:
    """Up to 3 pairwise-distinct masks over the four kinds, seeded."""
    if not 1 <= count <= 3:
        raise ConfigError(f"count must be in 1..3, got {count}")
    rng = np.random.default_rng(seed)
    masks, specs = [], []
    attempts = 0
    while len(masks) < count:
        attempts += 1
        if attempts > 100:
            raise ConfigError(f"could not draw {count} distinct masks after 100 attempts")
        kind = MASK_KINDS[rng.integers(0, len(MASK_KINDS))]
        spec = MaskSpec(kind=kind, seed=int(rng.integers(0, 2**31)))
        try:
            mask = spec.render(shape)
        except ConfigError:
            continue
        if any(np.array_equal(mask, m) for m in masks):
            continue
        masks.append(mask)
        specs.append(spec)
    return MaskSet(masks=masks, specs=specs)


def save_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def load_mask_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


# -- channel surgery ----------------------------------------------------------

INPAINT_IN_CHANNELS = 9


def expand_input_conv(base: UNet) -> UNet:
    """GLIDE-style surgery: 4 -> 9 input channels, new weights zeroed."""
    if base.config.in_channels == INPAINT_IN_CHANNELS:
        raise ConfigError("model already has 9 input channels; surgery is not idempotent")
    if base.config.in_channels != 4:
        raise ConfigError(f"expected a 4-channel base model, got {base.config.in_channels}")

    import dataclasses

    cfg = dataclasses.replace(base.config, in_channels=INPAINT_IN_CHANNELS)
    model = UNet(cfg)
    state = copy.deepcopy(base.state_dict())
    with torch.no_grad():
        new_w = torch.zeros_like(model.blocks["conv_in"].weight)
        new_w[:, :4] = state["blocks.conv_in.weight"]
        state["blocks.conv_in.weight"] = new_w
    model.load_state_dict(state)
    return model


def make_inpaint_input(x_t: torch.Tensor, image_latent: torch.Tensor,
                       mask: torch.Tensor) -> torch.Tensor:
    """Canonical 9-channel concat: [x_t | image_latent*(1-mask) | mask]."""
    if x_t.shape[1] != 4 or image_latent.shape[1] != 4:
        raise ShapeError("x_t and image_latent must both have 4 channels")
    if mask.shape[1] != 1:
        raise ShapeError(f"mask must have 1 channel, got {mask.shape[1]}")
    if x_t.shape[2:] != image_latent.shape[2:] or x_t.shape[2:] != mask.shape[2:]:
        raise ShapeError("spatial sizes of x_t, image_latent and mask must agree")
    return torch.cat([x_t, image_latent * (1.0 - mask), mask], dim=1)


def _mask_to_latent(mask: np.ndarray, downscale: int) -> torch.Tensor:
    m = mask.astype(np.float32)
    if downscale > 1:
        m = m[::downscale, ::downscale]
    return torch.from_numpy(m)[None, None]


def inpaint_sample(
    model: UNet,
    image: np.ndarray,
    mask: np.ndarray,
    prompt: Optional[str],
    guidance_scale: float,
    sched: NoiseSchedule,
    seed: int,
    codec,
    encoder_spec: Optional[EncoderSpec] = None,
    negative_prompt: Optional[str] = None,
    mode: str = "deterministic",
    allow_degenerate: bool = False,
    trace: Optional[SampleTrace] = None,
) -> np.ndarray:
    """Resample the masked region under the prompt; keep the rest.

    The unmasked region round-trips through the codec (output there matches
    the input within the codec's reconstruction error; exactly for the
    identity codec).  ``allow_degenerate`` lifts the all-masked/all-unmasked
    rejection for controlled experiments.
    """
    if model.config.in_channels != INPAINT_IN_CHANNELS:
        raise ConfigError("inpaint_sample requires a 9-channel model (run expand_input_conv)")
    if mask.dtype != bool:
        mask = mask >= 0.5
    cover = mask.mean()
    if not allow_degenerate and (cover == 0.0 or cover == 1.0):
        raise UsageError("mask is fully empty or fully covering; nothing to inpaint")

    spec = encoder_spec or EncoderSpec()
    ctx_null = null_context(spec)
    if prompt and prompt.strip():
        positive = encode_text(spec, prompt)
    else:
        positive = ctx_null
    negative = encode_text(spec, negative_prompt) if negative_prompt else None
    guidance = GuidanceSpec(guidance_scale, positive, negative)

    z_clean = codec.encode_image(image)
    m = _mask_to_latent(mask, codec.downscale).to(z_clean.dtype)
    gen = torch.Generator().manual_seed(seed)

    def eps_model(x, t, ctx):
        from .pipeline import model_time

        return model(make_inpaint_input(x, z_clean, m), model_time(sched, t), ctx)

    eps_fn = guided_eps_fn(eps_model, guidance, null_ctx=ctx_null, trace=trace)

    x = torch.randn(z_clean.shape, generator=gen, dtype=z_clean.dtype)
    ts = list(range(sched.T - 1, -1, -1))
    for t, t_prev in zip(ts, ts[1:] + [-1]):
        # keep the known region on the forward marginal at every step
        eps_known = torch.randn(z_clean.shape, generator=gen, dtype=z_clean.dtype)
        x = forward_sample(z_clean, t, eps_known, sched) * (1.0 - m) + x * m
        eps = eps_fn(x, t)
        x = sampler_step(eps, x, t, t_prev, sched, mode=mode, rng=gen)
        if trace is not None:
            trace.record_denoise(t, t_prev)

    z_out = z_clean * (1.0 - m) + x * m
    return codec.decode_image(z_out)


# -- outpainting ---------------------------------------------------------------

DIRECTIONS = ("left", "right", "top", "bottom")
MAX_CANVAS = 1024


def outpaint_expand(image: np.ndarray, direction: str, pixels: int,
                    max_canvas: int = MAX_CANVAS) -> tuple:
    """Grow the canvas in one direction; returns (expanded, border_mask).

    New area is replicate-padded (its content is irrelevant: the mask marks
    it for generation) and the original area is untouched.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if pixels < 0:
        raise ConfigError(f"pixels must be >= 0, got {pixels}")
    h, w = image.shape[:2]
    if pixels == 0:
        return image.copy(), np.zeros((h, w), dtype=bool)

    new_h = h + pixels if direction in ("top", "bottom") else h
    new_w = w + pixels if direction in ("left", "right") else w
    if new_h > max_canvas or new_w > max_canvas:
        raise ConfigError(
            f"expansion to {new_w}x{new_h} exceeds the {max_canvas} resolution cap"
        )

    pad = {
        "left": ((0, 0), (pixels, 0), (0, 0)),
        "right": ((0, 0), (0, pixels), (0, 0)),
        "top": ((pixels, 0), (0, 0), (0, 0)),
        "bottom": ((0, pixels), (0, 0), (0, 0)),
    }[direction]
    expanded = np.pad(image, pad, mode="edge")
    mask = np.ones((new_h, new_w), dtype=bool)
    y0 = pixels if direction == "top" else 0
    x0 = pixels if direction == "left" else 0
    mask[y0:y0 + h, x0:x0 + w] = False
    return expanded, mask
