import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import ConstantVelocity, ZeroVelocity
from helper.codec import ToyCodec
from helper.denoiser import (
    DegradationConfig,
    Denoiser,
    DenoiserConfig,
    backward,
    degrade_pair,
    flow_mapping,
    forward_velocity,
    refine,
    refiner_loss,
    sigma_embedding,
)
from helper.errors import ConfigError, InvalidArgumentError, ModelContractError, ShapeError
from helper.flow import Conditioning, CountingModel, estimate_clean
from helper.latent import Extent5, LatentGrid, Rng, axpy, mse, resize_spatial
from helper.swin import AttentionStats


def tiny_model(seed=0, init_std=0.3, **overrides):
    cfg = DenoiserConfig(**{"dim": 12, "heads": 2, "depth": 2, "window": 2, "init_std": init_std, **overrides})
    return Denoiser(cfg, seed=seed)


def textured_pixels(extent, seed=0):
    rng = Rng(seed)
    return LatentGrid.from_numpy(rng.uniform(0.0, 1.0, size=extent.as_tuple()))


class TestConfig:
    @pytest.mark.parametrize("overrides", [{"depth": 3}, {"dim": 10}, {"heads": 5}, {"dim": 12, "heads": 4}])
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            DenoiserConfig(**overrides)

    def test_token_dim(self):
        assert DenoiserConfig(in_channels=4, patch=2).token_dim == 16

    def test_sigma_embedding_shapes(self):
        assert sigma_embedding(0.5, 16).shape == (16,)
        assert sigma_embedding(torch.tensor([0.1, 0.9]), 16).shape == (2, 16)


class TestForward:
    @pytest.mark.parametrize("extent", [(1, 4, 4, 4, 4), (2, 4, 3, 6, 2), (1, 4, 1, 2, 8)])
    def test_extent_contract(self, random_grid, cond, extent):
        z = random_grid(extent)
        assert forward_velocity(tiny_model(), z, 0.4, cond).extent == z.extent

    def test_zero_head_gives_zero_velocity(self, random_grid, cond):
        model = tiny_model()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        out = forward_velocity(model, random_grid((1, 4, 4, 4, 4)), 0.7, cond)
        assert out.equals(LatentGrid.zeros(out.extent))

    def test_resolution_agnostic(self, random_grid, cond):
        model = tiny_model(patch=2, window=4)
        for size in (16, 32):
            z = random_grid((1, 4, 5, size, size), seed=size)
            assert forward_velocity(model, z, 0.3, cond).extent == z.extent

    def test_shift_window_switch(self):
        assert [b.shifted for b in tiny_model().blocks] == [False, True]
        assert [b.shifted for b in tiny_model(shift_window=False).blocks] == [False, False]

    def test_conditioning_is_a_shared_token_bias(self, random_grid, cond):
        model = tiny_model()
        with torch.no_grad():
            model.embed.weight.zero_()
            model.embed.bias.zero_()
            for p in model.blocks.parameters():
                p.zero_()
        z = random_grid((1, 4, 3, 4, 4))
        out = forward_velocity(model, z, 0.5, cond).values
        assert out.shape == z.values.shape
        assert torch.allclose(out, out[:, :, :1, :1, :1].expand_as(out), rtol=0, atol=1e-14)
        other = forward_velocity(model, z, 0.5, Conditioning.fixed(8, 7)).values
        assert not torch.allclose(out, other)

    def test_global_window_model(self, random_grid, cond):
        model = tiny_model(window=0)
        z = random_grid((1, 4, 5, 4, 4))
        stats = AttentionStats()
        with torch.no_grad():
            out = model(z.values, 0.5, cond.values, stats)
        assert out.shape == z.values.shape
        assert stats.windows == 2
        assert stats.token_pairs == 2 * (5 * 4 * 4) ** 2

    def test_same_seed_same_weights(self):
        a, b = tiny_model(seed=4), tiny_model(seed=4)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_patch_divisibility(self, random_grid, cond):
        with pytest.raises(ConfigError):
            forward_velocity(tiny_model(patch=2), random_grid((1, 4, 2, 5, 4)), 0.5, cond)

    def test_channel_and_cond_mismatch(self, random_grid, cond):
        with pytest.raises(ShapeError):
            forward_velocity(tiny_model(), random_grid((1, 3, 2, 4, 4)), 0.5, cond)
        with pytest.raises(ShapeError):
            forward_velocity(tiny_model(), random_grid((1, 4, 2, 4, 4)), 0.5, Conditioning.fixed(5, 1))

    def test_sigma_range(self, random_grid, cond):
        with pytest.raises(InvalidArgumentError):
            forward_velocity(tiny_model(), random_grid((1, 4, 2, 4, 4)), 1.5, cond)


class TestBackward:
    def scalar_loss(self, model, z, sigma, cond, upstream):
        with torch.no_grad():
            return float((model(z.values, sigma, cond.values) * upstream.values).sum())

    def test_matches_central_differences(self, random_grid, cond):
        model = tiny_model(seed=3)
        z = random_grid((1, 4, 4, 4, 4), seed=1)
        upstream = random_grid((1, 4, 4, 4, 4), seed=2)
        sigma = 0.35
        grads = backward(model, z, sigma, cond, upstream)
        rng = np.random.default_rng(11)
        h = 1e-5
        worst = 0.0
        checked = 0
        # two entries from every parameter tensor so each layer type is covered
        for name, param in model.named_parameters():
            flat = param.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                idx = int(idx)
                saved = float(flat[idx])
                flat[idx] = saved + h
                plus = self.scalar_loss(model, z, sigma, cond, upstream)
                flat[idx] = saved - h
                minus = self.scalar_loss(model, z, sigma, cond, upstream)
                flat[idx] = saved
                numeric = (plus - minus) / (2 * h)
                analytic = float(grads[name].view(-1)[idx])
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3))
                checked += 1
        assert checked >= 50
        assert worst <= 1e-4

    def test_zero_upstream_gives_zero_grads(self, random_grid, cond):
        model = tiny_model()
        z = random_grid((1, 4, 4, 4, 4))
        grads = backward(model, z, 0.5, cond, LatentGrid.zeros(z.extent))
        assert set(grads) == {name for name, _ in model.named_parameters()}
        assert all(not bool(g.any()) for g in grads.values())

    def test_zero_conditioning_freezes_projection(self, random_grid):
        model = tiny_model()
        z = random_grid((1, 4, 4, 4, 4), seed=5)
        grads = backward(model, z, 0.5, Conditioning.zeros(8), random_grid((1, 4, 4, 4, 4), seed=6))
        assert not bool(grads["cond_proj.weight"].any())
        assert bool(grads["head.weight"].any())

    def test_upstream_shape_checked(self, random_grid, cond):
        with pytest.raises(ShapeError):
            backward(tiny_model(), random_grid((1, 4, 4, 4, 4)), 0.5, cond, random_grid((1, 4, 4, 2, 4)))


class TestDegradation:
    def test_identity_degradation(self):
        hr = textured_pixels(Extent5(1, 1, 3, 8, 8))
        cfg = DegradationConfig(blur_radius=0, blur_strength=0.0, factor=1, noise_scale=0.0)
        z_lr, z_hr = degrade_pair(hr, ToyCodec(), cfg)
        assert z_lr.equals(z_hr)
        assert z_hr.equals(ToyCodec().encode(hr))

    def test_latent_noise_moment(self):
        hr = textured_pixels(Extent5(1, 1, 4, 64, 64), seed=1)
        cfg = DegradationConfig(blur_radius=0, factor=1, noise_scale=0.1, seed=3)
        z_lr, z_hr = degrade_pair(hr, ToyCodec(), cfg)
        assert z_lr.extent.numel >= 10_000
        assert mse(z_lr, z_hr) == pytest.approx(0.01, rel=0.05)

    def test_blur_reduces_high_frequency_energy(self):
        hr = textured_pixels(Extent5(1, 1, 2, 32, 32), seed=2)
        cfg = DegradationConfig(blur_radius=1, blur_strength=1.0, factor=1, noise_scale=0.0)
        z_lr, z_hr = degrade_pair(hr, ToyCodec(), cfg)
        laplace = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)

        def energy(z):
            e = z.extent
            x = z.values.reshape(e.b * e.c * e.f, 1, e.h, e.w)
            return float(F.conv2d(x, laplace.view(1, 1, 3, 3)).var())

        assert energy(z_lr) < energy(z_hr)

    def test_extents_match(self):
        hr = textured_pixels(Extent5(1, 1, 3, 16, 8))
        z_lr, z_hr = degrade_pair(hr, ToyCodec(), DegradationConfig())
        assert z_lr.extent == z_hr.extent == Extent5(1, 4, 3, 8, 4)

    def test_seeded_noise_is_deterministic(self):
        hr = textured_pixels(Extent5(1, 1, 2, 8, 8))
        a, _ = degrade_pair(hr, ToyCodec(), DegradationConfig(seed=9))
        b, _ = degrade_pair(hr, ToyCodec(), DegradationConfig(seed=9))
        assert a.equals(b)

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            degrade_pair(textured_pixels(Extent5(1, 1, 2, 6, 6)), ToyCodec(), DegradationConfig(factor=4))
        with pytest.raises(ConfigError):
            degrade_pair(textured_pixels(Extent5(1, 1, 2, 5, 6)), ToyCodec(), DegradationConfig(factor=1))

    def test_negative_scales_rejected(self):
        with pytest.raises(ConfigError):
            DegradationConfig(noise_scale=-0.1)
        with pytest.raises(ConfigError):
            DegradationConfig(factor=0)


class TestRefinerLoss:
    def test_clean_recovery_identity(self, random_grid):
        rng = np.random.default_rng(5)
        for i in range(100):
            z_lr = random_grid((1, 4, 2, 4, 4), seed=2 * i)
            z_hr = random_grid((1, 4, 2, 4, 4), seed=2 * i + 1)
            t = float(rng.uniform(1e-3, 1 - 1e-3))
            z_t, target = flow_mapping(z_lr, z_hr, t)
            recovered = estimate_clean(z_t, target, t)
            assert float((recovered.values - z_hr.values).abs().max()) <= 1e-12

    def test_per_sample_positions(self, random_grid):
        z_lr, z_hr = random_grid((2, 4, 2, 4, 4), 1), random_grid((2, 4, 2, 4, 4), 2)
        z_t, target = flow_mapping(z_lr, z_hr, torch.tensor([0.2, 0.7], dtype=torch.float64))
        for i, t in enumerate((0.2, 0.7)):
            single, _ = flow_mapping(LatentGrid(z_lr.values[i:i + 1]), LatentGrid(z_hr.values[i:i + 1]), t)
            assert torch.equal(z_t.values[i:i + 1], single.values)
        assert torch.equal(target.values, z_lr.values - z_hr.values)

    def test_per_sample_positions_must_match_batch(self, random_grid):
        z = random_grid((2, 4, 2, 4, 4))
        with pytest.raises(ShapeError):
            flow_mapping(z, z, torch.tensor([0.2, 0.3, 0.4], dtype=torch.float64))
        with pytest.raises(InvalidArgumentError):
            flow_mapping(z, z, torch.tensor([0.2, 1.0], dtype=torch.float64))

    def test_equal_pair_zero_model(self, random_grid, cond):
        model = tiny_model(init_std=0.0)
        z = random_grid((1, 4, 2, 4, 4))
        loss, grads = refiner_loss(model, z, z, 0.4, cond)
        assert loss == 0.0
        assert set(grads) == {name for name, _ in model.named_parameters()}
        assert all(float(g.abs().max()) == 0.0 for g in grads.values())

    def test_zero_model_loss_is_target_energy(self, random_grid, cond):
        z_lr, z_hr = random_grid((1, 4, 2, 4, 4), 1), random_grid((1, 4, 2, 4, 4), 2)
        loss, _ = refiner_loss(tiny_model(init_std=0.0), z_lr, z_hr, 0.6, cond)
        assert loss == pytest.approx(mse(z_lr, z_hr), rel=1e-12)

    @pytest.mark.parametrize("model", [ZeroVelocity(), ConstantVelocity(LatentGrid.zeros(Extent5(1, 4, 2, 4, 4)))])
    def test_models_without_gradients_rejected(self, random_grid, cond, model):
        z = random_grid((1, 4, 2, 4, 4))
        with pytest.raises(ModelContractError):
            refiner_loss(model, z, z, 0.5, cond)

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.2])
    def test_t_outside_open_interval(self, random_grid, cond, t):
        z = random_grid((1, 4, 2, 4, 4))
        with pytest.raises(InvalidArgumentError):
            refiner_loss(tiny_model(), z, z, t, cond)

    def test_extent_mismatch(self, random_grid, cond):
        with pytest.raises(ShapeError):
            refiner_loss(tiny_model(), random_grid((1, 4, 2, 4, 4)), random_grid((1, 4, 2, 2, 4)), 0.5, cond)

    def test_gradients_match_autograd_of_mse(self, random_grid, cond):
        model = tiny_model(init_std=0.2)
        z_lr, z_hr = random_grid((2, 4, 2, 4, 4), 1), random_grid((2, 4, 2, 4, 4), 2)
        t = torch.tensor([0.25, 0.8], dtype=torch.float64)
        loss, grads = refiner_loss(model, z_lr, z_hr, t, cond)
        z_t, target = flow_mapping(z_lr, z_hr, t)
        expected = torch.mean((model(z_t.values, t, cond.values) - target.values) ** 2)
        expected.backward()
        assert loss == pytest.approx(float(expected), rel=1e-12)
        for name, p in model.named_parameters():
            assert torch.allclose(grads[name], p.grad, rtol=1e-10, atol=1e-14)

    def test_per_sample_matches_scalar(self, random_grid, cond):
        model = tiny_model(init_std=0.2)
        z_lr, z_hr = random_grid((2, 4, 2, 4, 4), 3), random_grid((2, 4, 2, 4, 4), 4)
        scalar_loss, scalar_grads = refiner_loss(model, z_lr, z_hr, 0.3, cond)
        batch_loss, batch_grads = refiner_loss(model, z_lr, z_hr, torch.full((2,), 0.3, dtype=torch.float64), cond)
        assert batch_loss == pytest.approx(scalar_loss, rel=1e-12)
        for name in scalar_grads:
            assert torch.allclose(batch_grads[name], scalar_grads[name], rtol=1e-10, atol=1e-14)

    def test_gradient_step_lowers_loss(self, random_grid, cond):
        model = tiny_model(init_std=0.1)
        z_lr, z_hr = random_grid((1, 4, 4, 4, 4), 1), random_grid((1, 4, 4, 4, 4), 2)
        loss, grads = refiner_loss(model, z_lr, z_hr, 0.5, cond)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p -= 1e-3 * grads[name]
        after, _ = refiner_loss(model, z_lr, z_hr, 0.5, cond)
        assert after < loss


class TestRefine:
    @pytest.mark.parametrize("n_steps", [1, 3, 10])
    def test_exact_velocity_lands_on_target(self, random_grid, cond, n_steps):
        z_lr, z_hr = random_grid((1, 4, 2, 8, 8), 1), random_grid((1, 4, 2, 8, 8), 2)
        model = ConstantVelocity(axpy(-1.0, z_hr, z_lr))
        out = refine(model, z_lr, (8, 8), n_steps, cond)
        assert float((out.values - z_hr.values).abs().max()) <= 1e-10

    def test_zero_model_returns_upsampled_preview(self, random_grid, cond):
        preview = random_grid((1, 4, 2, 4, 4))
        out = refine(ZeroVelocity(), preview, (8, 8), 4, cond)
        assert out.equals(resize_spatial(preview, 8, 8))

    def test_nfe_equals_steps(self, random_grid, cond):
        counted = CountingModel(ZeroVelocity())
        refine(counted, random_grid((1, 4, 2, 4, 4)), (8, 8), 7, cond)
        assert counted.nfe == 7
        assert counted.nfe_at(8, 8) == 7

    def test_zero_steps_rejected(self, random_grid, cond):
        with pytest.raises(InvalidArgumentError):
            refine(ZeroVelocity(), random_grid((1, 4, 2, 4, 4)), (8, 8), 0, cond)
