import math

import pytest
import torch

from latentforge.conditioning import ContextEmbedding
from latentforge.errors import ConfigError, ShapeError
from latentforge.unet import (
    CrossAttention2d,
    ResidualUnit,
    TransformerBlock,
    UNetConfig,
    build_unet,
    denoise,
    param_count,
    plan,
)

TOY = UNetConfig(
    base_channels=32,
    level_multipliers=(1, 2, 4),
    blocks_per_level=2,
    bottleneck_ratio=0.5,
    attention_levels=(1, 2),
    context_dim=64,
    heads=2,
    time_embed_dim=64,
)

CONTROL = UNetConfig(
    base_channels=32,
    level_multipliers=(1, 2, 4),
    blocks_per_level=2,
    bottleneck_ratio=1.0,
    attention_levels=(1, 2),
    context_dim=64,
    heads=2,
    time_embed_dim=64,
)

TINY = UNetConfig(
    base_channels=8,
    level_multipliers=(1, 2),
    blocks_per_level=1,
    bottleneck_ratio=0.5,
    attention_levels=(1,),
    context_dim=16,
    heads=2,
    time_embed_dim=16,
)


def _ctx(batch, length, dim, seed=0):
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randn(batch, length, dim, generator=gen)
    mask = torch.ones(batch, length, dtype=torch.bool)
    return ContextEmbedding(tokens, mask)


def test_forward_shape_contract():
    model = build_unet(TOY, seed=0)
    x = torch.randn(1, 4, 32, 32, generator=torch.Generator().manual_seed(0))
    out = model(x, 3, _ctx(1, 5, 64))
    assert out.shape == (1, 4, 32, 32)


@pytest.mark.parametrize("cfg", [TOY, CONTROL, TINY, UNetConfig(in_channels=9, base_channels=16,
                                                                level_multipliers=(1, 2),
                                                                blocks_per_level=1,
                                                                attention_levels=(1,),
                                                                context_dim=32, heads=2,
                                                                time_embed_dim=32)])
def test_param_count_matches_instantiation(cfg):
    # Oracle: exhaustive summation over the instantiated parameter tree.
    model = build_unet(cfg, seed=0)
    instantiated = sum(p.numel() for p in model.parameters())
    assert param_count(cfg).total == instantiated


def test_param_count_single_conv_closed_form():
    # 1x1 conv with c_in=4, c_out=8: 4*8 + 8 = 40
    from latentforge.unet import _conv_params

    assert _conv_params(4, 8, 1) == 40


def test_bottleneck_doubles_conv3x3_at_param_parity():
    rep = param_count(TOY)
    rep_c = param_count(CONTROL)
    inner = rep.conv3x3_layers - 2  # exclude conv_in / conv_out
    inner_c = rep_c.conv3x3_layers - 2
    assert inner == 2 * inner_c
    assert abs(rep.total - rep_c.total) / rep_c.total < 0.15


def test_depth_metric_at_least_1p5x_control():
    assert param_count(TOY).depth >= 1.5 * param_count(CONTROL).depth


def test_per_unit_conv3x3_exactly_doubles():
    model = build_unet(TOY, seed=0)
    control = build_unet(CONTROL, seed=0)

    def convs3(unit):
        return sum(1 for m in unit.modules()
                   if isinstance(m, torch.nn.Conv2d) and m.kernel_size == (3, 3))

    units = [m for m in model.modules() if isinstance(m, ResidualUnit)]
    c_units = [m for m in control.modules() if isinstance(m, ResidualUnit)]
    assert all(convs3(u) == 4 for u in units)
    assert all(convs3(u) == 2 for u in c_units)


def test_level_zero_has_no_attention_parameters():
    model = build_unet(TOY, seed=0)
    for e in model.entries:
        if e.kind == "attn":
            assert e.level != 0
    level0_names = [n for n, _ in model.named_parameters()
                    if n.startswith(("blocks.down_0_", "blocks.up_0_"))]
    assert level0_names, "level 0 should exist"
    assert not any("attn" in n for n in level0_names)


def test_attention_at_level_zero_rejected():
    with pytest.raises(ConfigError) as exc:
        UNetConfig(attention_levels=(0, 1))
    assert "level 0" in str(exc.value)


def test_upsample_skip_has_trained_conv():
    model = build_unet(TOY, seed=0)
    up_units = [m for m in model.modules()
                if isinstance(m, ResidualUnit) and m.spec.direction == "up"]
    assert up_units
    for u in up_units:
        assert u.skip_conv is not None
        assert u.skip_conv.kernel_size == (1, 1)
        assert u.skip_conv.weight.requires_grad


def test_forward_purity_bit_identical():
    model = build_unet(TINY, seed=1)
    x = torch.randn(2, 4, 16, 16, generator=torch.Generator().manual_seed(2))
    ctx = _ctx(2, 3, 16)
    a = model(x, 1, ctx)
    b = model(x, 1, ctx)
    assert torch.equal(a, b)


def test_gradient_matches_central_finite_differences():
    # Oracle: central finite differences in float64 at 5 random coordinates.
    torch.manual_seed(0)
    model = build_unet(TINY, seed=3).double()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    ctx_tokens = torch.randn(1, 3, 16, dtype=torch.float64)
    ctx = ContextEmbedding(ctx_tokens, torch.ones(1, 3, dtype=torch.bool))
    w = torch.randn(1, 4, 8, 8, dtype=torch.float64)

    loss = (model(x, 1, ctx) * w).sum()
    (grad,) = torch.autograd.grad(loss, x)

    gen = torch.Generator().manual_seed(4)
    coords = [tuple(int(torch.randint(0, s, (1,), generator=gen)) for s in x.shape)
              for _ in range(5)]
    h = 1e-5
    for idx in coords:
        xp = x.detach().clone()
        xm = x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fp = (model(xp, 1, ctx) * w).sum().item()
            fm = (model(xm, 1, ctx) * w).sum().item()
        fd = (fp - fm) / (2 * h)
        denom = max(abs(fd), abs(grad[idx].item()), 1e-8)
        assert abs(fd - grad[idx].item()) / denom < 1e-3


def test_zeroed_cross_attention_projection_makes_output_context_free():
    model = build_unet(TINY, seed=5)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, CrossAttention2d):
                m.to_out.weight.zero_()
                m.to_out.bias.zero_()
    x = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(6))
    a = model(x, 1, _ctx(1, 4, 16, seed=7))
    b = model(x, 1, _ctx(1, 4, 16, seed=8))
    assert torch.equal(a, b)


def test_masked_tokens_cannot_influence_output():
    model = build_unet(TINY, seed=9)
    gen = torch.Generator().manual_seed(10)
    tokens = torch.randn(1, 4, 16, generator=gen)
    mask = torch.tensor([[True, True, False, False]])
    x = torch.randn(1, 4, 16, 16, generator=gen)
    a = model(x, 1, ContextEmbedding(tokens, mask))
    perturbed = tokens.clone()
    perturbed[0, 2:] += 100.0
    b = model(x, 1, ContextEmbedding(perturbed, mask))
    assert torch.equal(a, b)


def test_translation_equivariance_conv_only_circular():
    cfg = UNetConfig(
        base_channels=8,
        level_multipliers=(1, 2, 2),
        blocks_per_level=1,
        bottleneck_ratio=0.5,
        attention_levels=(),
        context_dim=16,
        heads=2,
        time_embed_dim=16,
        padding_mode="circular",
    )
    model = build_unet(cfg, seed=11)
    x = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(12))
    shift = 4  # divisible by the full downsample factor (2 transitions)

    out = model(x, 1)
    out_shifted = model(torch.roll(x, (shift, shift), dims=(2, 3)), 1)
    assert torch.allclose(out_shifted, torch.roll(out, (shift, shift), dims=(2, 3)), atol=1e-5)

    feats = model.down_features(x, 1)
    feats_shifted = model.down_features(torch.roll(x, (shift, shift), dims=(2, 3)), 1)
    for lvl, (f, fs) in enumerate(zip(feats, feats_shifted), start=1):
        s = shift // (2 ** lvl)
        assert torch.allclose(fs, torch.roll(f, (s, s), dims=(2, 3)), atol=1e-5)


def test_context_dim_mismatch_is_conditioning_error():
    model = build_unet(TINY, seed=13)
    x = torch.randn(1, 4, 16, 16)
    with pytest.raises(ShapeError) as exc:
        denoise(model, x, 1, _ctx(1, 3, 32))
    assert "context" in str(exc.value)


def test_input_channel_mismatch_rejected():
    model = build_unet(TINY, seed=14)
    with pytest.raises(ShapeError):
        model(torch.randn(1, 9, 16, 16), 1)


def test_heads_must_divide_channels():
    with pytest.raises(ConfigError):
        UNetConfig(base_channels=6, level_multipliers=(1, 2), attention_levels=(1,), heads=5)


def test_bottleneck_ratio_validated():
    with pytest.raises(ConfigError):
        UNetConfig(bottleneck_ratio=0.0)
    with pytest.raises(ConfigError):
        UNetConfig(bottleneck_ratio=1.5)


def test_block_spec_hidden_channels():
    entries = plan(TOY)
    for e in entries:
        if e.kind == "res":
            assert e.block.hidden_ch == max(1, round(0.5 * e.block.out_ch))


def test_time_accepts_int_and_tensor():
    model = build_unet(TINY, seed=15)
    x = torch.randn(2, 4, 16, 16, generator=torch.Generator().manual_seed(16))
    a = model(x, 3)
    b = model(x, torch.tensor([3.0, 3.0]))
    assert torch.allclose(a, b)


def test_per_block_report_covers_total():
    rep = param_count(TOY)
    assert sum(rep.per_block.values()) == rep.total


def test_transformer_block_present_only_at_attention_levels():
    model = build_unet(TOY, seed=17)
    attn_names = [n for n, m in model.blocks.items() if isinstance(m, TransformerBlock)]
    assert attn_names
    for n in attn_names:
        assert not n.startswith(("down_0", "up_0"))
