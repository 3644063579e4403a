"""Denoising U-Net built from bottlenecked residual units.

The residual unit follows the deep-GAN bottleneck idea: with
``bottleneck_ratio`` r < 1 a unit holds four 3x3 convolutions alternating
between full width C and hidden width h = round(r*C), so at r = 0.5 it has
twice the 3x3 layers of the plain two-conv unit at (almost exactly) the same
parameter count.  Normalization is group-based, activations are SiLU, and
attention (self + cross + gated FFN) appears only at the configured levels,
never at full resolution.

``plan(cfg)`` describes the whole network as a flat list of entries; the
module builder and the analytic parameter counter both walk that list, so
counts cannot drift from the instantiated model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def _norm_groups(channels: int) -> int:
    # 32 groups when the width allows it, per-channel groups for thin layers,
    # gcd fallback for widths >= 32 that 32 does not divide.
    if channels < 32:
        return channels
    if channels % 32 == 0:
        return 32
    return math.gcd(channels, 32)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    out_channels: int = 4
    base_channels: int = 32
    level_multipliers: tuple = (1, 2, 4)
    blocks_per_level: int = 2
    bottleneck_ratio: float = 0.5
    attention_levels: tuple = (1, 2)
    context_dim: int = 64
    heads: int = 2
    time_embed_dim: int = 64
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not self.level_multipliers or any(m < 1 for m in self.level_multipliers):
            raise ConfigError(f"level_multipliers must be positive, got {self.level_multipliers}")
        if not 0.0 < self.bottleneck_ratio <= 1.0:
            raise ConfigError(f"bottleneck_ratio must be in (0, 1], got {self.bottleneck_ratio}")
        if 0 in self.attention_levels:
            raise ConfigError(
                "attention_levels must exclude level 0: the full-resolution level is convolution-only"
            )
        n_levels = len(self.level_multipliers)
        if any(not 0 < lv < n_levels for lv in self.attention_levels):
            raise ConfigError(
                f"attention_levels {self.attention_levels} out of range for {n_levels} levels"
            )
        for lv in self.attention_levels:
            c = self.base_channels * self.level_multipliers[lv]
            if c % self.heads != 0:
                raise ConfigError(f"channels {c} at level {lv} not divisible by heads={self.heads}")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")

    @property
    def level_channels(self) -> list:
        return [self.base_channels * m for m in self.level_multipliers]


# Illustrative full-scale configuration.  The published model's exact level
# widths and head counts are not public; these values only reproduce the
# qualitative shape (conv-only top level, attention below) and are NOT
# verified against any released checkpoint.
PAPER_SCALE_UNVERIFIED = UNetConfig(
    base_channels=384,
    level_multipliers=(1, 2, 4, 8),
    blocks_per_level=3,
    bottleneck_ratio=0.5,
    attention_levels=(1, 2, 3),
    context_dim=4096,
    heads=16,
    time_embed_dim=1024,
)


@dataclass(frozen=True)
class BlockSpec:
    """One residual unit: channel widths plus resampling direction."""

    in_ch: int
    out_ch: int
    hidden_ch: int
    direction: str  # down | up | same
    norm_groups: int
    bottleneck: bool

    @property
    def has_skip_conv(self) -> bool:
        # Upsample skips always carry a 1x1 conv (no channel dropping);
        # otherwise only a channel change needs one.
        return self.direction == "up" or self.in_ch != self.out_ch


@dataclass(frozen=True)
class AttnSpec:
    channels: int
    context_dim: int
    heads: int


@dataclass(frozen=True)
class PlanEntry:
    name: str
    kind: str  # conv_in | time | res | attn | out
    stage: str  # io | down | mid | up
    level: int = -1
    block: Optional[BlockSpec] = None
    attn: Optional[AttnSpec] = None
    push_skip: bool = False
    pop_skip: bool = False


def _res_spec(cfg: UNetConfig, in_ch: int, out_ch: int, direction: str) -> BlockSpec:
    bottleneck = cfg.bottleneck_ratio < 1.0
    hidden = max(1, round(cfg.bottleneck_ratio * out_ch)) if bottleneck else out_ch
    return BlockSpec(
        in_ch=in_ch,
        out_ch=out_ch,
        hidden_ch=hidden,
        direction=direction,
        norm_groups=_norm_groups(in_ch),
        bottleneck=bottleneck,
    )


def plan(cfg: UNetConfig) -> list:
    """Flat structural description of the network, in forward order.

    ``push_skip`` marks entries whose output joins the skip stack (on the
    attention entry when a unit is followed by attention, so the skip always
    carries the level's final activation); ``pop_skip`` marks up-path units
    that concatenate a popped skip to their input.
    """
    levels = cfg.level_channels
    n_levels = len(levels)
    entries = [
        PlanEntry("time_mlp", "time", "io"),
        PlanEntry("conv_in", "conv_in", "io", push_skip=True),
    ]
    skip_stack = [cfg.base_channels]

    ch = cfg.base_channels
    for i, c in enumerate(levels):
        for j in range(cfg.blocks_per_level):
            res = PlanEntry(f"down_{i}_res{j}", "res", "down", i,
                            block=_res_spec(cfg, ch, c, "same"))
            ch = c
            if i in cfg.attention_levels:
                entries.append(res)
                entries.append(PlanEntry(f"down_{i}_attn{j}", "attn", "down", i,
                                         attn=AttnSpec(c, cfg.context_dim, cfg.heads),
                                         push_skip=True))
            else:
                entries.append(replace(res, push_skip=True))
            skip_stack.append(c)
        if i < n_levels - 1:
            entries.append(PlanEntry(f"down_{i}_to_{i + 1}", "res", "down", i + 1,
                                     block=_res_spec(cfg, c, c, "down"), push_skip=True))
            skip_stack.append(c)

    c_mid = levels[-1]
    entries.append(PlanEntry("mid_res0", "res", "mid", n_levels - 1,
                             block=_res_spec(cfg, c_mid, c_mid, "same")))
    if (n_levels - 1) in cfg.attention_levels:
        entries.append(PlanEntry("mid_attn", "attn", "mid", n_levels - 1,
                                 attn=AttnSpec(c_mid, cfg.context_dim, cfg.heads)))
    entries.append(PlanEntry("mid_res1", "res", "mid", n_levels - 1,
                             block=_res_spec(cfg, c_mid, c_mid, "same")))

    ch = c_mid
    for i in reversed(range(n_levels)):
        c = levels[i]
        for j in range(cfg.blocks_per_level + 1):
            s = skip_stack.pop()
            entries.append(PlanEntry(f"up_{i}_res{j}", "res", "up", i,
                                     block=_res_spec(cfg, ch + s, c, "same"), pop_skip=True))
            ch = c
            if i in cfg.attention_levels:
                entries.append(PlanEntry(f"up_{i}_attn{j}", "attn", "up", i,
                                         attn=AttnSpec(c, cfg.context_dim, cfg.heads)))
        if i > 0:
            entries.append(PlanEntry(f"up_{i}_to_{i - 1}", "res", "up", i - 1,
                                     block=_res_spec(cfg, c, c, "up")))
    assert not skip_stack

    entries.append(PlanEntry("conv_out", "out", "io"))
    return entries


# ---------------------------------------------------------------------------
# torch modules
# ---------------------------------------------------------------------------


class SinusoidalTime(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
        )
        ang = t[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class TimeMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.embed = SinusoidalTime(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(self.embed(t))))


class ResidualUnit(nn.Module):
    """GroupNorm/SiLU residual unit, optionally bottlenecked and resampling.

    Bottlenecked form (ratio < 1): four 3x3 convs C->h->C->h->C.
    Plain form (ratio = 1): two 3x3 convs C->C->C.
    Time embedding is added after the first conv.
    """

    def __init__(self, spec: BlockSpec, time_dim: int, padding_mode: str = "zeros"):
        super().__init__()
        self.spec = spec
        pm = padding_mode
        c_in, c_out, h = spec.in_ch, spec.out_ch, spec.hidden_ch

        self.norm1 = nn.GroupNorm(_norm_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, h, 3, padding=1, padding_mode=pm)
        self.time_proj = nn.Linear(time_dim, h)
        self.norm2 = nn.GroupNorm(_norm_groups(h), h)
        self.conv2 = nn.Conv2d(h, c_out, 3, padding=1, padding_mode=pm)
        if spec.bottleneck:
            self.norm3 = nn.GroupNorm(_norm_groups(c_out), c_out)
            self.conv3 = nn.Conv2d(c_out, h, 3, padding=1, padding_mode=pm)
            self.norm4 = nn.GroupNorm(_norm_groups(h), h)
            self.conv4 = nn.Conv2d(h, c_out, 3, padding=1, padding_mode=pm)
        self.skip_conv = nn.Conv2d(c_in, c_out, 1) if spec.has_skip_conv else None

    def _resample(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.direction == "down":
            return F.avg_pool2d(x, 2)
        if self.spec.direction == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self._resample(F.silu(self.norm1(x)))
        h = self.conv1(h)
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        if self.spec.bottleneck:
            h = self.conv3(F.silu(self.norm3(h)))
            h = self.conv4(F.silu(self.norm4(h)))
        skip = self._resample(x)
        if self.skip_conv is not None:
            skip = self.skip_conv(skip)
        return skip + h


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.view(b, n, heads, c // heads).transpose(1, 2)  # (B, H, N, dh)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def _attend(q, k, v, mask=None):
    scale = q.shape[-1] ** -0.5
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    if mask is not None:
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
    return torch.matmul(torch.softmax(logits, dim=-1), v)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        t = self.norm(x).flatten(2).transpose(1, 2)  # (B, N, C)
        q = _split_heads(self.to_q(t), self.heads)
        k = _split_heads(self.to_k(t), self.heads)
        v = _split_heads(self.to_v(t), self.heads)
        out = self.to_out(_merge_heads(_attend(q, k, v)))
        return x + out.transpose(1, 2).view(b, c, hh, ww)


class ImagePromptAdapter(nn.Module):
    """Extra key/value projections for image-prompt tokens at one site.

    Bias-free so zero tokens contribute exactly zero through the shared
    output projection.
    """

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)


class CrossAttention2d(nn.Module):
    """Text cross-attention with an optional decoupled image-prompt branch.

    The image branch attends with its own K/V and its (bias-free) result is
    added to the text attention result before the shared output projection;
    result: attached output = text output + image delta, exactly.
    """

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.adapter: Optional[ImagePromptAdapter] = None
        self.adapter_scale: float = 1.0

    def attention_parts(self, x, ctx, mask=None, visual_tokens=None):
        """(text contribution incl. bias, image-branch delta) at this site."""
        b, c, hh, ww = x.shape
        t = self.norm(x).flatten(2).transpose(1, 2)
        q = _split_heads(self.to_q(t), self.heads)
        k = _split_heads(self.to_k(ctx), self.heads)
        v = _split_heads(self.to_v(ctx), self.heads)
        text_out = self.to_out(_merge_heads(_attend(q, k, v, mask)))

        img_out = None
        if self.adapter is not None:
            vt = visual_tokens
            if vt is None:
                vt = torch.zeros(b, 1, self.to_k.in_features, dtype=x.dtype, device=x.device)
            ki = _split_heads(self.adapter.to_k(vt), self.heads)
            vi = _split_heads(self.adapter.to_v(vt), self.heads)
            raw = _merge_heads(_attend(q, ki, vi))
            # shared projection without its bias: pure additive delta
            img_out = self.adapter_scale * F.linear(raw, self.to_out.weight)

        def to_map(o):
            return o.transpose(1, 2).view(b, c, hh, ww)

        return to_map(text_out), (to_map(img_out) if img_out is not None else None)

    def forward(self, x, ctx, mask=None, visual_tokens=None):
        text_out, img_out = self.attention_parts(x, ctx, mask, visual_tokens)
        out = x + text_out
        if img_out is not None:
            out = out + img_out
        return out


class GatedFFN(nn.Module):
    def __init__(self, channels: int, mult: int = 2):
        super().__init__()
        hidden = mult * channels
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.fc_gate = nn.Linear(channels, 2 * hidden)
        self.fc_out = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        t = self.norm(x).flatten(2).transpose(1, 2)
        a, g = self.fc_gate(t).chunk(2, dim=-1)
        out = self.fc_out(a * F.silu(g))
        return x + out.transpose(1, 2).view(b, c, hh, ww)


class TransformerBlock(nn.Module):
    """Self-attention + text cross-attention + gated FFN, all residual."""

    def __init__(self, spec: AttnSpec):
        super().__init__()
        self.self_attn = SelfAttention2d(spec.channels, spec.heads)
        self.cross_attn = CrossAttention2d(spec.channels, spec.context_dim, spec.heads)
        self.ffn = GatedFFN(spec.channels)

    def forward(self, x, ctx, mask=None, visual_tokens=None):
        x = self.self_attn(x)
        x = self.cross_attn(x, ctx, mask, visual_tokens)
        return self.ffn(x)


class UNet(nn.Module):
    """Epsilon-prediction denoiser: forward(x_t, t, context) -> eps."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.config = cfg
        self.entries = plan(cfg)
        self.blocks = nn.ModuleDict()
        for e in self.entries:
            if e.kind == "time":
                self.blocks[e.name] = TimeMLP(cfg.time_embed_dim)
            elif e.kind == "conv_in":
                self.blocks[e.name] = nn.Conv2d(
                    cfg.in_channels, cfg.base_channels, 3, padding=1,
                    padding_mode=cfg.padding_mode,
                )
            elif e.kind == "res":
                self.blocks[e.name] = ResidualUnit(e.block, cfg.time_embed_dim, cfg.padding_mode)
            elif e.kind == "attn":
                self.blocks[e.name] = TransformerBlock(e.attn)
            elif e.kind == "out":
                c0 = cfg.level_channels[0]
                self.blocks["out_norm"] = nn.GroupNorm(_norm_groups(c0), c0)
                self.blocks["out_conv"] = nn.Conv2d(
                    c0, cfg.out_channels, 3, padding=1, padding_mode=cfg.padding_mode
                )

    # -- context plumbing ---------------------------------------------------

    def _unpack_context(self, context, batch: int, device, dtype):
        if context is None:
            tokens = torch.zeros(batch, 1, self.config.context_dim, dtype=dtype, device=device)
            return tokens, None
        if hasattr(context, "tokens"):
            tokens, mask = context.tokens, context.mask
        elif isinstance(context, tuple):
            tokens, mask = context
        else:
            tokens, mask = context, None
        if tokens.shape[-1] != self.config.context_dim:
            raise ShapeError(
                f"context dim {tokens.shape[-1]} != model context_dim {self.config.context_dim}"
            )
        if tokens.shape[0] == 1 and batch > 1:
            tokens = tokens.expand(batch, -1, -1)
            if mask is not None:
                mask = mask.expand(batch, -1)
        return tokens.to(dtype), mask

    def _time_tensor(self, t, batch: int, device, dtype) -> torch.Tensor:
        if isinstance(t, (int, float)):
            return torch.full((batch,), float(t), device=device, dtype=dtype)
        t = torch.as_tensor(t, device=device).to(dtype)
        if t.dim() == 0:
            t = t[None]
        if t.shape[0] == 1 and batch > 1:
            t = t.expand(batch)
        return t

    # -- main passes ----------------------------------------------------------

    def forward(self, x, t, context=None, control_residuals=None, visual_tokens=None):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected input (B,{self.config.in_channels},H,W), got {tuple(x.shape)}"
            )
        tokens, mask = self._unpack_context(context, x.shape[0], x.device, x.dtype)
        temb = self.blocks["time_mlp"](self._time_tensor(t, x.shape[0], x.device, x.dtype))

        skips = []
        h = x
        mid_seen = False
        for e in self.entries:
            if e.kind in ("time",):
                continue
            if e.stage == "mid" and not mid_seen:
                mid_seen = True
                if control_residuals is not None:
                    if len(control_residuals) != len(skips) + 1:
                        raise ShapeError(
                            f"expected {len(skips) + 1} control residuals, got {len(control_residuals)}"
                        )
                    skips = [s + r for s, r in zip(skips, control_residuals[:-1])]
                    h = h + control_residuals[-1]
            if e.kind == "conv_in":
                h = self.blocks[e.name](h)
            elif e.kind == "res":
                if e.pop_skip:
                    h = torch.cat([h, skips.pop()], dim=1)
                h = self.blocks[e.name](h, temb)
            elif e.kind == "attn":
                h = self.blocks[e.name](h, tokens, mask, visual_tokens)
            elif e.kind == "out":
                h = self.blocks["out_conv"](F.silu(self.blocks["out_norm"](h)))
                continue
            if e.push_skip:
                skips.append(h)
        return h

    def down_features(self, x, t, context=None):
        """Output after each resolution-downsample transition (one feature
        per downsample level).  Used by the distillation critic."""
        tokens, mask = self._unpack_context(context, x.shape[0], x.device, x.dtype)
        temb = self.blocks["time_mlp"](self._time_tensor(t, x.shape[0], x.device, x.dtype))
        feats = []
        h = x
        for e in self.entries:
            if e.stage == "mid":
                break
            if e.kind == "conv_in":
                h = self.blocks[e.name](h)
            elif e.kind == "res":
                h = self.blocks[e.name](h, temb)
                if e.block.direction == "down":
                    feats.append(h)
            elif e.kind == "attn":
                h = self.blocks[e.name](h, tokens, mask, visual_tokens=None)
        return feats

    def down_skips(self, x, t, context=None, hint=None):
        """Skip tensors (in push order) plus the bottom feature; optional
        ``hint`` feature map is added right after the input convolution."""
        tokens, mask = self._unpack_context(context, x.shape[0], x.device, x.dtype)
        temb = self.blocks["time_mlp"](self._time_tensor(t, x.shape[0], x.device, x.dtype))
        skips = []
        h = x
        for e in self.entries:
            if e.stage == "mid":
                break
            if e.kind == "conv_in":
                h = self.blocks[e.name](h)
                if hint is not None:
                    h = h + hint
            elif e.kind == "res":
                h = self.blocks[e.name](h, temb)
            elif e.kind == "attn":
                h = self.blocks[e.name](h, tokens, mask, visual_tokens=None)
            if e.push_skip:
                skips.append(h)
        return skips, h

    def cross_attention_sites(self):
        return [m for m in self.modules() if isinstance(m, CrossAttention2d)]


def build_unet(cfg: UNetConfig, seed: int = 0) -> UNet:
    """Instantiate a UNet with reproducible (seed-determined) weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = UNet(cfg)
    return model


def denoise(model: UNet, x_t: torch.Tensor, t, context=None) -> torch.Tensor:
    """Single denoiser evaluation; validates the context dimension."""
    return model(x_t, t, context)


# ---------------------------------------------------------------------------
# analytic parameter counting
# ---------------------------------------------------------------------------


def _conv_params(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return c_in * c_out * k * k + (c_out if bias else 0)


def _linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def _res_params(b: BlockSpec, time_dim: int) -> int:
    n = 2 * b.in_ch + 2 * b.hidden_ch  # norm1 + norm2
    n += _conv_params(b.in_ch, b.hidden_ch, 3) + _conv_params(b.hidden_ch, b.out_ch, 3)
    n += _linear_params(time_dim, b.hidden_ch)
    if b.bottleneck:
        n += 2 * b.out_ch + 2 * b.hidden_ch  # norm3 + norm4
        n += _conv_params(b.out_ch, b.hidden_ch, 3) + _conv_params(b.hidden_ch, b.out_ch, 3)
    if b.has_skip_conv:
        n += _conv_params(b.in_ch, b.out_ch, 1)
    return n


def _attn_params(a: AttnSpec, ff_mult: int = 2) -> int:
    c, d = a.channels, a.context_dim
    self_attn = 2 * c + _linear_params(c, c) + 2 * _linear_params(c, c, bias=False) + _linear_params(c, c)
    cross = 2 * c + _linear_params(c, c) + 2 * _linear_params(d, c, bias=False) + _linear_params(c, c)
    hidden = ff_mult * c
    ffn = 2 * c + _linear_params(c, 2 * hidden) + _linear_params(hidden, c)
    return self_attn + cross + ffn


@dataclass
class ParamCountReport:
    per_block: dict = field(default_factory=dict)
    total: int = 0
    conv3x3_layers: int = 0
    depth: int = 0  # weighted layers on the main path


def param_count(cfg: UNetConfig) -> ParamCountReport:
    """Exact trainable-parameter count derived from the plan, no weights."""
    entries = plan(cfg)
    report = ParamCountReport()
    for e in entries:
        if e.kind == "time":
            n = 2 * _linear_params(cfg.time_embed_dim, cfg.time_embed_dim)
        elif e.kind == "conv_in":
            n = _conv_params(cfg.in_channels, cfg.base_channels, 3)
            report.conv3x3_layers += 1
            report.depth += 1
        elif e.kind == "res":
            n = _res_params(e.block, cfg.time_embed_dim)
            report.conv3x3_layers += 4 if e.block.bottleneck else 2
            report.depth += 4 if e.block.bottleneck else 2
        elif e.kind == "attn":
            n = _attn_params(e.attn)
            report.depth += 3  # self-attn, cross-attn, ffn
        elif e.kind == "out":
            c0 = cfg.level_channels[0]
            n = 2 * c0 + _conv_params(c0, cfg.out_channels, 3)
            report.conv3x3_layers += 1
            report.depth += 1
        else:
            continue
        report.per_block[e.name if e.kind != "out" else "conv_out"] = n
        report.total += n
    return report
