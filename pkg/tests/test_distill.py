import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from latentforge.conditioning import ContextEmbedding, EncoderSpec
from latentforge.diffusion import forward_sample
from latentforge.distill import (
    Discriminator,
    DiscriminatorSpec,
    DistillConfig,
    DistillTrainer,
    adversarial_losses,
    build_discriminator,
    generator_loss_terms,
    rbf_mmd2,
    refine,
    student_sample,
    teacher_denoise_target,
)
from latentforge.errors import ConfigError, DivergenceError, ShapeError
from latentforge.schedule import make_schedule, student_schedule
from latentforge.unet import UNetConfig, build_unet

TINY = UNetConfig(base_channels=8, level_multipliers=(1, 2), blocks_per_level=1,
                  attention_levels=(1,), context_dim=16, heads=2, time_embed_dim=16)
SPEC = DiscriminatorSpec(context_dim=16, attn_heads=2)


def _ctx(batch=1, length=3, dim=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return ContextEmbedding(torch.randn(batch, length, dim, generator=gen),
                            torch.ones(batch, length, dtype=torch.bool))


class TestDiscriminator:
    def test_output_finite_across_student_timesteps(self):
        teacher = build_unet(TINY, seed=0)
        disc = build_discriminator(teacher, SPEC)
        sched = student_schedule()
        gen = torch.Generator().manual_seed(1)
        for t in range(4):
            x = torch.randn(2, 4, 16, 16, generator=gen)
            from latentforge.pipeline import model_time

            score = disc(x, model_time(sched, t), _ctx(2))
            assert score.shape == (2,)
            assert torch.isfinite(score).all()

    def test_one_head_per_downsample_level(self):
        teacher = build_unet(UNetConfig(base_channels=8, level_multipliers=(1, 2, 2),
                                        blocks_per_level=1, attention_levels=(1,),
                                        context_dim=16, heads=2, time_embed_dim=16), seed=0)
        disc = build_discriminator(teacher, SPEC)
        assert len(disc.heads) == 2

    def test_level_mismatch_rejected(self):
        teacher = build_unet(TINY, seed=0)
        with pytest.raises(ConfigError):
            build_discriminator(teacher, DiscriminatorSpec(context_dim=16, expected_levels=3))

    def test_context_dim_mismatch_rejected(self):
        teacher = build_unet(TINY, seed=0)
        with pytest.raises(ConfigError):
            build_discriminator(teacher, DiscriminatorSpec(context_dim=32))

    def test_trunk_frozen_during_training(self):
        teacher = build_unet(TINY, seed=0)
        disc = build_discriminator(teacher, SPEC)
        before = disc.trunk_hash()
        opt = torch.optim.Adam(disc.trainable_parameters(), lr=1e-2)
        gen = torch.Generator().manual_seed(2)
        for _ in range(20):
            x = torch.randn(2, 4, 16, 16, generator=gen)
            loss = disc(x, 500.0, _ctx(2)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert disc.trunk_hash() == before
        assert all(not p.requires_grad for p in disc.trunk.parameters())

    def test_heads_ignore_text_when_projection_zeroed(self):
        teacher = build_unet(TINY, seed=0)
        disc = build_discriminator(teacher, SPEC)
        with torch.no_grad():
            for head in disc.heads:
                head.cross_attn.to_out.weight.zero_()
                head.cross_attn.to_out.bias.zero_()
            # the trunk's own cross-attention must be silenced too
            from latentforge.unet import CrossAttention2d

            for m in disc.trunk.modules():
                if isinstance(m, CrossAttention2d):
                    m.to_out.weight.zero_()
                    m.to_out.bias.zero_()
        x = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(3))
        a = disc(x, 500.0, _ctx(seed=4))
        b = disc(x, 500.0, _ctx(seed=5))
        assert torch.equal(a, b)


class TestAdversarialLosses:
    def test_constant_critic_closed_form(self):
        real = torch.randn(4, 1, 2, 2, generator=torch.Generator().manual_seed(0))
        fake = torch.randn_like(real)
        loss_d, loss_g, gp = adversarial_losses(lambda x: torch.zeros(x.shape[0]),
                                                real, fake, gp_weight=10.0)
        assert gp.item() == pytest.approx(1.0)
        assert loss_d.item() == pytest.approx(10.0)
        assert loss_g.item() == pytest.approx(0.0)

    def test_linear_critic_gradient_norm_closed_form(self):
        real = torch.randn(3, 2, 4, 4, generator=torch.Generator().manual_seed(1)).double()
        fake = torch.randn_like(real)
        n = real[0].numel()
        _, _, gp = adversarial_losses(lambda x: x.flatten(1).sum(1), real, fake, gp_weight=1.0)
        assert gp.item() == pytest.approx((math.sqrt(n) - 1.0) ** 2, rel=1e-9)

    def test_gp_matches_finite_differences(self):
        # Oracle: central finite differences of a tiny random critic.
        torch.manual_seed(2)
        critic = nn.Sequential(nn.Linear(4, 8), nn.Tanh(), nn.Linear(8, 1)).double()

        def score(x):
            return critic(x.flatten(1))[:, 0]

        gen = torch.Generator().manual_seed(3)
        real = torch.randn(3, 1, 2, 2, generator=gen).double()
        fake = torch.randn(3, 1, 2, 2, generator=gen).double()
        _, _, gp = adversarial_losses(score, real, fake, gp_weight=1.0, rng=7)

        # reproduce the interpolates with the same seeded draw
        gen2 = torch.Generator().manual_seed(7)
        u = torch.rand(3, 1, 1, 1, generator=gen2, dtype=real.dtype)
        x_hat = u * real + (1 - u) * fake
        h = 1e-6
        norms = []
        for b in range(3):
            g = torch.zeros(4, dtype=torch.float64)
            for i in range(4):
                xp = x_hat.clone().flatten(1)
                xm = x_hat.clone().flatten(1)
                xp[b, i] += h
                xm[b, i] -= h
                with torch.no_grad():
                    g[i] = (critic(xp)[b, 0] - critic(xm)[b, 0]) / (2 * h)
            norms.append(g.norm().item())
        gp_fd = float(np.mean([(n - 1.0) ** 2 for n in norms]))
        assert abs(gp.item() - gp_fd) / max(abs(gp_fd), 1e-12) < 1e-3

    def test_one_step_descent_improves_critic(self):
        torch.manual_seed(4)
        critic = nn.Sequential(nn.Linear(4, 16), nn.Tanh(), nn.Linear(16, 1))

        def score(x):
            return critic(x.flatten(1))[:, 0]

        gen = torch.Generator().manual_seed(5)
        real = torch.randn(64, 1, 2, 2, generator=gen) + 2.0
        fake = torch.randn(64, 1, 2, 2, generator=gen) - 2.0
        opt = torch.optim.SGD(critic.parameters(), lr=1e-2)
        loss_before, _, _ = adversarial_losses(score, real, fake, gp_weight=1.0, rng=6)
        opt.zero_grad()
        loss_before.backward()
        opt.step()
        loss_after, _, _ = adversarial_losses(score, real, fake, gp_weight=1.0, rng=6)
        assert loss_after.item() < loss_before.item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adversarial_losses(lambda x: x.sum(), torch.zeros(2, 1, 2, 2),
                               torch.zeros(2, 1, 2, 3))

    def test_nan_raises_divergence_error(self):
        real = torch.zeros(2, 1, 2, 2)
        fake = torch.zeros(2, 1, 2, 2)
        with pytest.raises(DivergenceError):
            adversarial_losses(lambda x: torch.full((x.shape[0],), float("nan")), real, fake)


class TestGeneratorTerms:
    def test_registry_has_exactly_two_terms(self):
        fake = torch.randn(2, 1, 2, 2, generator=torch.Generator().manual_seed(0))
        terms = generator_loss_terms(torch.zeros(2), fake, torch.zeros_like(fake), 0.5)
        assert set(terms) == {"adversarial", "teacher_match"}

    def test_zero_match_weight_gives_pure_adversarial_gradient(self):
        torch.manual_seed(1)
        gen_net = nn.Linear(3, 4)
        critic = nn.Linear(4, 1)
        z = torch.randn(8, 3)
        target = torch.randn(8, 4)

        def grads_for(weight):
            gen_net.zero_grad()
            fake = gen_net(z)
            terms = generator_loss_terms(critic(fake)[:, 0], fake, target, weight)
            sum(terms.values()).backward()
            return gen_net.weight.grad.clone()

        g0 = grads_for(0.0)
        gen_net.zero_grad()
        fake = gen_net(z)
        (-critic(fake)[:, 0].mean()).backward()
        g_pure = gen_net.weight.grad.clone()
        assert torch.allclose(g0, g_pure)


class TestTrainer:
    def _trainer(self, w_match=1.0):
        teacher = build_unet(TINY, seed=0)
        student = build_unet(TINY, seed=0)
        disc = build_discriminator(teacher, SPEC)
        cfg = DistillConfig(teacher_match_weight=w_match, teacher_rollout_steps=2)
        tsched = make_schedule(16, 1e-3, 0.2, "linear")
        return DistillTrainer(student, teacher, disc, cfg, teacher_sched=tsched)

    def test_applied_lr_ratio_is_100(self):
        trainer = self._trainer()
        assert trainer.applied_lr_ratio == pytest.approx(100.0)
        assert trainer.opt_d.param_groups[0]["lr"] == pytest.approx(1e-3)
        assert trainer.opt_g.param_groups[0]["lr"] == pytest.approx(1e-5)

    def test_train_step_metrics_and_frozen_trunk(self):
        trainer = self._trainer()
        before = trainer.disc.trunk_hash()
        gen = torch.Generator().manual_seed(7)
        latents = torch.randn(2, 4, 16, 16, generator=gen)
        for _ in range(3):
            metrics = trainer.train_step(latents, _ctx(2), gen)
        for key in ("loss_d", "loss_g", "gp", "grad_norm_d", "grad_norm_g", "lr_d", "lr_g"):
            assert key in metrics
        assert math.isfinite(metrics["loss_d"])
        assert trainer.disc.trunk_hash() == before

    def test_divergence_detection(self):
        trainer = self._trainer()
        trainer.cfg.divergence_threshold = 1e-12
        trainer.cfg.divergence_patience = 2
        gen = torch.Generator().manual_seed(8)
        latents = torch.randn(2, 4, 16, 16, generator=gen)
        with pytest.raises(DivergenceError):
            for _ in range(5):
                trainer.train_step(latents, _ctx(2), gen)

    def test_teacher_target_shape(self):
        teacher = build_unet(TINY, seed=0)
        ssched = student_schedule()
        tsched = make_schedule(16, 1e-3, 0.2, "linear")
        gen = torch.Generator().manual_seed(9)
        x0 = torch.randn(2, 4, 16, 16, generator=gen)
        x_s = forward_sample(x0, 2, torch.randn_like(x0), ssched)
        target = teacher_denoise_target(teacher, x_s, 2, ssched, tsched, _ctx(2), 3)
        assert target.shape == x_s.shape
        assert torch.isfinite(target).all()


class TestStudentSample:
    def test_nfe_exactly_four(self):
        student = build_unet(TINY, seed=0)
        _, trace = student_sample(student, "a prompt", seed=0, height=16, width=16,
                                  encoder_spec=EncoderSpec(kind="hash-embedding", context_dim=16))
        assert trace.nfe == 4
        assert len([e for e in trace.events if e.startswith("denoise")]) == 4

    def test_fixed_seed_bit_identical(self):
        student = build_unet(TINY, seed=0)
        enc = EncoderSpec(kind="hash-embedding", context_dim=16)
        a, _ = student_sample(student, "p", seed=5, height=16, width=16, encoder_spec=enc)
        b, _ = student_sample(student, "p", seed=5, height=16, width=16, encoder_spec=enc)
        np.testing.assert_array_equal(a, b)


class _OracleStudent:
    """Predicts exactly the eps that reconstructs a known clean latent."""

    def __init__(self, z_true, sched):
        self.z_true = z_true
        self.sched = sched

    def __call__(self, x, tv, ctx=None, visual_tokens=None):
        import math as _m

        t = [i for i in range(self.sched.T)
             if abs(self.sched.time_value(i) * 1000.0 - float(tv)) < 1e-9][0]
        abar = self.sched.alpha_bar_at(t)
        return (x - _m.sqrt(abar) * self.z_true) / _m.sqrt(1 - abar)


class TestRefine:
    def test_trace_is_noise_at_2_then_two_denoise_steps(self):
        student = build_unet(TINY, seed=0)
        rng = np.random.default_rng(0)
        image = rng.random((16, 16, 3)).astype(np.float32)
        _, trace = refine(image, student, seed=1,
                          encoder_spec=EncoderSpec(kind="hash-embedding", context_dim=16))
        assert trace.events == ["noise@2", "denoise 2→1", "denoise 1→0"]
        assert trace.nfe == 2

    def test_perfect_denoiser_returns_input(self):
        from latentforge.autoencoder import IdentityCodec

        sched = student_schedule()
        codec = IdentityCodec()
        rng = np.random.default_rng(1)
        image = rng.random((8, 8, 3)).astype(np.float32)
        z_true = codec.encode_image(image)
        oracle = _OracleStudent(z_true, sched)
        out, trace = refine(image, oracle, sched, seed=2, codec=codec)
        assert trace.nfe == 2
        np.testing.assert_allclose(out, image, atol=1e-5)

    def test_wrong_schedule_rejected(self):
        student = build_unet(TINY, seed=0)
        with pytest.raises(ConfigError):
            refine(np.zeros((8, 8, 3), dtype=np.float32), student,
                   make_schedule(8, 0.1, 0.5, "linear"), seed=0)


class TestMMD:
    def test_same_distribution_near_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (200, 4))
        y = rng.normal(0, 1, (200, 4))
        z = rng.normal(3, 1, (200, 4))
        near = rbf_mmd2(x, y)
        far = rbf_mmd2(x, z)
        assert abs(near) < 0.05
        assert far > 10 * max(near, 1e-6)
