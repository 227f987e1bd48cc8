"""Tests for preconditioning, noise sampling, robustness policies, the objective and the sampler."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch
from scipy import stats

from vidsem.config import (
    DiffusionConfig,
    GuidanceConfig,
    MixedSupervisionPolicy,
    NestedDropoutPolicy,
    NoiseDistributionConfig,
    SamplerConfig,
)
from vidsem.denoiser import SemanticDiT
from vidsem.diffusion import (
    CONTEXT_C_NOISE,
    NoiseLevel,
    _guided_denoise,
    add_noise,
    denoise,
    diffusion_loss,
    karras_sigmas,
    load_denoiser,
    nested_dropout,
    nested_dropout_batch,
    noise_level_from_draws,
    precondition,
    representation_guidance,
    sample,
    sample_channel_counts,
    sample_noise_level,
    save_denoiser,
    select_supervision_features,
    train_diffusion,
    zero_predictor_loss,
)
from vidsem.exceptions import ArgumentError, DependencyError, FingerprintMismatchError, ShapeError

M = 1  # context latent frames in the micro batches


def _batch(seed: int = 0, dtype=torch.float32):
    """Latents (2, 3, 4, 4, 4) and features (2, 3, 2, 2, 8)."""
    g = torch.Generator().manual_seed(seed)
    latents = torch.randn(2, 3, 4, 4, 4, generator=g, dtype=dtype)
    features = torch.randn(2, 3, 2, 2, 8, generator=g, dtype=dtype)
    return latents, features


@pytest.fixture
def stage2_config(dit_config) -> DiffusionConfig:
    return DiffusionConfig(
        denoiser=dit_config,
        nested_dropout=NestedDropoutPolicy(channel_set=[2, 4, 8]),
        mixed_supervision=MixedSupervisionPolicy(p_predicted=0.0),
        warmup_steps=0, steps=2, batch_size=2, log_every=1,
    )


def _clips(count: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    latents = [rng.normal(size=(3, 4, 4, 4)).astype(np.float32) for _ in range(count)]
    features = [rng.normal(size=(3, 2, 2, 8)).astype(np.float32) for _ in range(count)]
    return latents, features


# -- preconditioning --------------------------------------------------------

def test_precondition_at_unit_sigma():
    c = precondition(1.0)
    assert (c.t, c.c_skip, c.c_out, c.c_in, c.c_noise) == (0.5, 0.5, -0.5, 0.5, 0.5)
    assert c.lam == 4.0


def test_precondition_identities():
    sigma = torch.logspace(-3, 3, 25, dtype=torch.float64)
    c = precondition(sigma)
    exact = dict(rtol=1e-12, atol=0.0)
    t = sigma / (1 + sigma)
    torch.testing.assert_close(c.t, t, **exact)
    torch.testing.assert_close(c.c_skip, 1 / (1 + sigma), **exact)
    torch.testing.assert_close(c.c_out, -t, **exact)
    torch.testing.assert_close(c.c_in, 1 - t, **exact)
    torch.testing.assert_close(c.c_noise, t, **exact)
    torch.testing.assert_close(c.lam, (1 + sigma) ** 2 / sigma ** 2, **exact)
    torch.testing.assert_close(c.c_skip - c.c_out, torch.ones_like(sigma), **exact)
    torch.testing.assert_close(c.lam * c.c_out ** 2, torch.ones_like(sigma), **exact)
    assert c.t.dtype == torch.float64


def test_precondition_keeps_t_inside_the_unit_interval():
    c = precondition(torch.logspace(-12, 5, 25, dtype=torch.float64))
    assert bool(((c.t > 0) & (c.t < 1)).all())


def test_precondition_limits():
    big = precondition(1e5)
    assert big.c_skip == pytest.approx(1e-5, rel=1e-3)
    assert big.lam == pytest.approx(1.0, rel=1e-4)
    small = precondition(1e-6)
    assert small.c_skip == pytest.approx(1.0, abs=1e-5)


def test_context_frames_use_fixed_noise_label():
    assert precondition(0.5, is_context=True).c_noise == CONTEXT_C_NOISE == 0.001
    labels = precondition(torch.tensor([0.1, 10.0]), is_context=True).c_noise
    assert torch.equal(labels, torch.full((2,), 0.001))


def test_non_positive_sigma_is_rejected():
    with pytest.raises(ArgumentError):
        precondition(0.0)
    with pytest.raises(ArgumentError):
        precondition(torch.tensor([1.0, -1.0]))
    with pytest.raises(ArgumentError):
        NoiseLevel(0.0)
    assert NoiseLevel(0.3, is_context=True).sigma == 0.3


# -- training noise levels --------------------------------------------------

def test_noise_level_from_draws():
    config = NoiseDistributionConfig()
    one = torch.ones(1, dtype=torch.float64)
    zero = torch.zeros(1, dtype=torch.float64)
    assert noise_level_from_draws(zero, one, zero, config).item() == 0.5
    assert noise_level_from_draws(zero, zero, zero, config).item() == pytest.approx(200.0)
    assert noise_level_from_draws(zero, zero, one, config).item() == pytest.approx(1e5)


def test_noise_level_distribution():
    sigma = sample_noise_level(NoiseDistributionConfig(), 1_000_000, torch.Generator().manual_seed(0))
    assert sigma.dtype == torch.float64
    high = sigma >= 200.0
    assert abs(high.double().mean().item() - 0.05) < 0.002
    assert not bool(((sigma >= 1.0) & (sigma < 200.0)).any())
    assert bool((sigma <= 1e5).all()) and bool((sigma > 0).all())
    assert abs(sigma[~high].median().item() - 0.5) < 0.005


def test_add_noise():
    z = torch.zeros(2, 3)
    eps = torch.randn(2, 3)
    noised, returned = add_noise(z, 2.0, noise=eps)
    assert torch.equal(noised, 2.0 * eps) and returned is eps
    with pytest.raises(ShapeError):
        add_noise(z, 1.0, noise=torch.zeros(3, 2))


def test_add_noise_variance_and_determinism():
    sigma = torch.tensor([0.5, 1.0, 2.0, 4.0], dtype=torch.float64)
    z = torch.zeros(4, 200_000, dtype=torch.float64)
    noised, _ = add_noise(z, sigma, torch.Generator().manual_seed(0))
    ratio = noised.var(dim=1) / sigma ** 2
    assert torch.allclose(ratio, torch.ones(4, dtype=torch.float64), rtol=0.015)
    again, _ = add_noise(z, sigma, torch.Generator().manual_seed(0))
    assert torch.equal(noised, again)


# -- nested dropout -----------------------------------------------------------

def test_nested_dropout_zeroes_the_tail():
    h = torch.tensor([1.0, 2.0, 3.0, 4.0])
    assert nested_dropout(h, 2).tolist() == [1.0, 2.0, 0.0, 0.0]
    assert torch.equal(nested_dropout(h, 4), h)


def test_nested_dropout_keeps_prefix_exactly():
    h = torch.randn(2, 3, 4, 4, 8)
    out = nested_dropout(h, 4, [2, 4, 8])
    assert torch.equal(out[..., :4], h[..., :4])
    assert torch.count_nonzero(out[..., 4:]) == 0


@pytest.mark.parametrize("c", [0, 3, 9])
def test_nested_dropout_rejects_bad_counts(c):
    with pytest.raises(ArgumentError):
        nested_dropout(torch.ones(8), c, [2, 4, 8] if c == 3 else None)


def test_nested_dropout_batch_is_per_example():
    h = torch.randn(2, 3, 2, 2, 8)
    out = nested_dropout_batch(h, torch.tensor([2, 8]))
    assert torch.equal(out[0], nested_dropout(h[0], 2))
    assert torch.equal(out[1], h[1])


def test_channel_counts_are_uniform_over_the_set():
    policy = NestedDropoutPolicy(channel_set=[2, 4, 8])
    counts = sample_channel_counts(policy, 80_000, 8, torch.Generator().manual_seed(0))
    observed = [int((counts == c).sum()) for c in policy.channel_set]
    assert sum(observed) == 80_000
    assert stats.chisquare(observed).pvalue > 0.01


def test_disabled_nested_dropout_keeps_all_channels():
    counts = sample_channel_counts(NestedDropoutPolicy(enabled=False), 5, 8)
    assert counts.tolist() == [8] * 5


# -- mixed supervision ------------------------------------------------------

def test_supervision_without_predictions():
    _, h = _batch()
    out, chosen = select_supervision_features(h, None, MixedSupervisionPolicy(p_predicted=0.0), M)
    assert out is h and not bool(chosen.any())
    with pytest.raises(DependencyError):
        select_supervision_features(h, None, MixedSupervisionPolicy(p_predicted=0.5), M)


def test_supervision_swaps_only_future_frames():
    _, h = _batch()
    predicted = torch.randn(2, 2, 2, 2, 8)
    out, chosen = select_supervision_features(h, predicted, MixedSupervisionPolicy(p_predicted=1.0), M)
    assert bool(chosen.all())
    assert torch.equal(out[:, :M], h[:, :M])
    assert torch.equal(out[:, M:], predicted)
    with pytest.raises(ShapeError):
        select_supervision_features(h, predicted[:, :1], MixedSupervisionPolicy(p_predicted=1.0), M)


def test_supervision_rate():
    n = 100_000
    gt = torch.zeros(n, 3, 1, 1, 1)
    predicted = torch.ones(n, 2, 1, 1, 1)
    out, chosen = select_supervision_features(gt, predicted, MixedSupervisionPolicy(p_predicted=0.1),
                                              M, torch.Generator().manual_seed(0))
    assert abs(chosen.double().mean().item() - 0.1) < 0.005
    assert torch.equal(out[:, M:, 0, 0, 0].amax(dim=1) == 1, chosen)


# -- objective --------------------------------------------------------------

def test_zero_network_denoises_to_scaled_input(dit_config):
    model = SemanticDiT(dit_config, 4, 8)
    latents, h = _batch()
    sigma = torch.tensor([0.5, 3.0])
    with torch.no_grad():
        d = denoise(model, latents[:, M:], latents[:, :M], h, sigma)
    c_skip = (1 - sigma / (1 + sigma)).reshape(2, 1, 1, 1, 1)
    assert torch.allclose(d, c_skip * latents[:, M:])


def test_loss_weighting(dit_config):
    model = SemanticDiT(dit_config, 4, 8)
    latents, h = _batch(dtype=torch.float64)
    model = model.double()
    sigma = torch.tensor([0.5, 3.0], dtype=torch.float64)
    noise = torch.randn(latents[:, M:].shape, dtype=torch.float64)
    loss = diffusion_loss(model, latents, h, sigma, M, noise=noise)

    future = latents[:, M:]
    t = (sigma / (1 + sigma)).reshape(2, 1, 1, 1, 1)
    mse = ((1 - t) * (future + sigma.reshape(2, 1, 1, 1, 1) * noise) - future).pow(2).flatten(1).mean(1)
    expected = ((1 + sigma) ** 2 / sigma ** 2 * mse).mean()
    assert torch.allclose(loss, expected)


def test_loss_vanishes_on_exact_prediction(dit_config):
    model = SemanticDiT(dit_config, 4, 8)
    latents, h = _batch()
    sigma = torch.tensor([0.5, 3.0])
    noise = torch.randn(latents[:, M:].shape)
    target = latents.clone()
    with torch.no_grad():
        noised, _ = add_noise(latents[:, M:], sigma, noise=noise)
        target[:, M:] = denoise(model, noised, latents[:, :M], h, sigma)
        loss = diffusion_loss(model, latents, h, sigma, M, noise=noise, target=target)
    assert loss.item() < 1e-12


def test_context_frames_are_not_scored(make_dit):
    model = make_dit()
    latents, h = _batch()
    sigma = torch.tensor([0.5, 3.0])
    noise = torch.randn(latents[:, M:].shape)
    target = latents.clone().requires_grad_(True)
    loss = diffusion_loss(model, latents, h, sigma, M, noise=noise, target=target)
    loss.backward()
    assert torch.count_nonzero(target.grad[:, :M]) == 0

    shifted = latents.clone()
    shifted[:, :M] += 5.0
    with torch.no_grad():
        again = diffusion_loss(model, latents, h, sigma, M, noise=noise, target=shifted)
    assert torch.allclose(again, loss.detach())


def test_loss_gradient_matches_finite_differences(make_dit):
    model = make_dit(dtype=torch.float64).train()
    latents, h = _batch(dtype=torch.float64)
    sigma = torch.tensor([0.5, 2.0], dtype=torch.float64)
    noise = torch.randn(latents[:, M:].shape, generator=torch.Generator().manual_seed(3),
                        dtype=torch.float64)

    def loss_fn():
        return diffusion_loss(model, latents, h, sigma, M, noise=noise)

    loss_fn().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    g = torch.Generator().manual_seed(1)
    eps = 1e-6
    for _ in range(64):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        i = int(torch.randint(p.numel(), (1,), generator=g))
        flat = p.data.view(-1)
        original = flat[i].item()
        with torch.no_grad():
            flat[i] = original + eps
            up = loss_fn().item()
            flat[i] = original - eps
            down = loss_fn().item()
            flat[i] = original
        numeric = (up - down) / (2 * eps)
        analytic = p.grad.view(-1)[i].item()
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8


def test_zero_predictor_loss():
    latents = torch.ones(2, 3, 2, 2, 1)
    sigma = torch.tensor([1.0, 1.0])
    assert zero_predictor_loss(latents, sigma, M).item() == pytest.approx(4.0)


# -- sampling ---------------------------------------------------------------

def test_karras_grid():
    sigmas = karras_sigmas(SamplerConfig(num_steps=4))
    assert sigmas.shape == (5,)
    assert sigmas[0].item() == pytest.approx(80.0)
    assert sigmas[3].item() == pytest.approx(0.002)
    assert sigmas[-1].item() == 0.0
    assert bool((sigmas[1:] < sigmas[:-1]).all())
    assert karras_sigmas(SamplerConfig(num_steps=1)).tolist() == [80.0, 0.0]


def test_single_step_sampler_returns_the_denoised_prior(make_dit):
    model = make_dit().eval()
    latents, h = _batch()
    sampler = SamplerConfig(num_steps=1)
    out = sample(model, latents[:, :M], h, sampler, generator=torch.Generator().manual_seed(4))

    x = torch.randn(latents[:, M:].shape, generator=torch.Generator().manual_seed(4)) * 80.0
    with torch.no_grad():
        expected = denoise(model, x, latents[:, :M], h, torch.full((2,), 80.0))
    assert torch.allclose(out, expected, atol=1e-6)


def test_euler_steps_with_a_zero_network(dit_config):
    model = SemanticDiT(dit_config, 4, 8)
    latents, h = _batch()
    sampler = SamplerConfig(num_steps=2)
    out = sample(model, latents[:, :M], h, sampler, generator=torch.Generator().manual_seed(5))

    s0, s1, _ = karras_sigmas(sampler).tolist()
    x0 = torch.randn(latents[:, M:].shape, generator=torch.Generator().manual_seed(5)) * s0
    c0, c1 = 1 / (1 + s0), 1 / (1 + s1)
    x1 = x0 + (s1 - s0) * (x0 - c0 * x0) / s0
    assert torch.allclose(out, c1 * x1, rtol=1e-4, atol=1e-4)


def test_sampler_is_seeded(make_dit):
    model = make_dit()
    latents, h = _batch()
    sampler = SamplerConfig(num_steps=3)
    a = sample(model, latents[:, :M], h, sampler)
    b = sample(model, latents[:, :M], h, sampler)
    assert a.shape == (2, 2, 4, 4, 4)
    assert torch.equal(a, b)
    c = sample(model, latents[:, :M], h, dataclasses.replace(sampler, seed=1))
    assert not torch.equal(a, c)


def test_zero_guidance_weight_is_unguided(make_dit):
    model = make_dit()
    latents, h = _batch()
    sampler = SamplerConfig(num_steps=3)
    plain = sample(model, latents[:, :M], h, sampler)
    guided = sample(model, latents[:, :M], h, sampler, guidance=GuidanceConfig(w=0.0, coarse_c=2))
    assert torch.equal(plain, guided)


def test_sampler_needs_future_features(make_dit):
    latents, h = _batch()
    with pytest.raises(ShapeError):
        sample(make_dit(), latents[:, :3], h, SamplerConfig(num_steps=1))


def test_representation_guidance():
    full, coarse = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(representation_guidance(full, full, 0.7), full)
    assert torch.equal(representation_guidance(full, coarse, 0.0), full)
    step = representation_guidance(full, coarse, 2.0) - representation_guidance(full, coarse, 1.0)
    assert torch.allclose(step, full - coarse, atol=1e-6)
    with pytest.raises(ArgumentError):
        representation_guidance(full, coarse, -0.1)
    with pytest.raises(ShapeError):
        representation_guidance(full, coarse[:2], 0.5)


def test_batched_guidance_matches_separate_passes(make_dit):
    model = make_dit().eval()
    latents, h = _batch()
    coarse = nested_dropout(h, 2)
    x = latents[:, M:]
    sigma = torch.tensor([0.7, 5.0])
    with torch.no_grad():
        batched = _guided_denoise(model, x, latents[:, :M], h, coarse, sigma, 0.5, CONTEXT_C_NOISE)
        full = denoise(model, x, latents[:, :M], h, sigma)
        weak = denoise(model, x, latents[:, :M], coarse, sigma)
    assert torch.allclose(batched, representation_guidance(full, weak, 0.5), atol=1e-5)


# -- training and checkpoints --------------------------------------------------

def test_train_diffusion_is_deterministic(stage2_config):
    latents, features = _clips()
    rows = []
    a = train_diffusion(stage2_config, latents, features, M, on_log=rows.append, quiet=True)
    b = train_diffusion(stage2_config, latents, features, M, quiet=True)
    for name, value in a.model.state_dict().items():
        assert torch.equal(value, b.model.state_dict()[name])

    assert [r["step"] for r in rows] == [1, 2]
    assert all(r["arm"] == "full" for r in rows)
    assert all(c in (2, 4, 8) for r in rows for c in r["c"])
    assert a.loss_ema is not None and a.zero_loss_ema is not None


def test_unconditioned_arm_ignores_features(stage2_config):
    config = dataclasses.replace(stage2_config, conditioning=False)
    latents, features = _clips()
    _, other = _clips(seed=1)
    a = train_diffusion(config, latents, features, M, arm="no_features", quiet=True)
    b = train_diffusion(config, latents, other, M, arm="no_features", quiet=True)
    for name, value in a.model.state_dict().items():
        assert torch.equal(value, b.model.state_dict()[name])


def test_train_diffusion_with_predicted_features(stage2_config):
    config = dataclasses.replace(stage2_config, mixed_supervision=MixedSupervisionPolicy(p_predicted=1.0))
    latents, features = _clips()
    with pytest.raises(DependencyError):
        train_diffusion(config, latents, features, M, quiet=True)

    predicted = [f[M:] + 1.0 for f in features]
    steps = []
    train_diffusion(config, latents, features, M, predicted_future=predicted,
                    on_eval=lambda step, model: steps.append(step), eval_every=1, quiet=True)
    assert steps == [1, 2]


def test_unconditioned_arm_needs_no_predictions(stage2_config):
    config = dataclasses.replace(stage2_config, conditioning=False,
                                 mixed_supervision=MixedSupervisionPolicy(p_predicted=1.0))
    latents, features = _clips()
    result = train_diffusion(config, latents, features, M, arm="baseline", quiet=True)
    assert [row["step"] for row in result.log] == [1, 2]


def test_train_diffusion_rejects_mismatched_clips(stage2_config):
    latents, features = _clips()
    with pytest.raises(ShapeError):
        train_diffusion(stage2_config, latents, features[:2], M, quiet=True)


def test_denoiser_checkpoint(stage2_config, make_dit, tmp_path):
    model = make_dit().eval()
    path = tmp_path / "stage2" / "full.pt"
    save_denoiser(path, model, stage2_config, {"codec": "aaa", "pca": "bbb"})

    loaded, config, fingerprints = load_denoiser(path, {"codec": "aaa"})
    assert config == stage2_config
    assert fingerprints == {"codec": "aaa", "pca": "bbb"}
    latents, h = _batch()
    c = torch.rand(2, 3)
    with torch.no_grad():
        assert torch.equal(model(latents, h, c), loaded(latents, h, c))

    with pytest.raises(FingerprintMismatchError):
        load_denoiser(path, {"pca": "zzz"})
    with pytest.raises(DependencyError):
        load_denoiser(tmp_path / "missing.pt")
