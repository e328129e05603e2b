"""
ノイズスケジュール・デノイザー・サンプリング・拡散モデル学習のテスト
"""

import math

import numpy as np
import pandas as pd
import pytest
import torch

from src.augment.segmenter import train_segmenter
from src.autoencoder.model import AutoencoderConfig, AutoencoderKL
from src.autoencoder.ops import LatentGrid
from src.autoencoder.trainer import train_autoencoder
from src.dataio.preprocessing import preprocess_dataset
from src.dataio.toy_generator import generate_toy_dataset
from src.dataio.types import Image2D, SegMask
from src.diffusion.model import DiffusionConfig, RADiffModel, predict_noise
from src.diffusion.sampling import sample, sample_images, sample_latents
from src.diffusion.schedule import (
    denoise_step,
    diffusion_loss,
    make_schedule,
    predict_x0,
    q_sample,
)
from src.diffusion.trainer import load_denoiser, train_diffusion
from src.diffusion.unet import DenoiserConfig, DenoiserNet
from src.metrics.report import background_swap_check, background_swap_consistency
from src.metrics.segmentation import segmentation_score
from src.metrics.ssim import ssim
from src.models.layers import SpatialAttention, scaled_dot_attention, timestep_embedding
from src.models.segmenter import SegmenterConfig
from src.utils.checkpoint import load_checkpoint
from src.utils.errors import ParameterError, ShapeError
from src.utils.seeding import seeded_build

TINY_NET = dict(base_channels=8, time_emb_dim=16, num_heads=2, embedding_dim=16, background_channels=4)


def _tiny_model(mode: str, timesteps: int = 10) -> RADiffModel:
    cfg = DiffusionConfig(mode=mode, timesteps=timesteps, beta_start=1e-3, beta_end=0.3, **TINY_NET)
    return seeded_build(lambda: RADiffModel(cfg, latent_channels=4, f=4, latent_hw=(8, 8)), 0).eval()


@pytest.fixture
def tiny_ae():
    return seeded_build(lambda: AutoencoderKL(AutoencoderConfig(base_channels=8)), 1).eval()


# ---------------------------------------------------------------------------
# スケジュール
# ---------------------------------------------------------------------------

def test_schedule_two_steps_by_hand():
    sched = make_schedule(2, 0.1, 0.2)
    assert np.allclose(sched.beta, [0.1, 0.2])
    assert np.allclose(sched.alpha_bar, [0.9, 0.72])


def test_full_schedule_terminal_alpha_bar():
    assert make_schedule(1000, 1e-4, 0.02).alpha_bar[-1] < 1e-4


def test_desk_schedule_terminal_alpha_bar():
    sched = make_schedule(200, 5e-4, 0.1)
    assert sched.alpha_bar[-1] < 0.01
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(np.diff(sched.beta) >= 0)


@pytest.mark.parametrize("T,start,end", [(10, 0.02, 0.02), (1, 0.01, 0.02), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_range(T, start, end):
    with pytest.raises(ParameterError):
        make_schedule(T, start, end)


def test_alpha_bar_is_exact_product():
    sched = make_schedule(200, 5e-4, 0.1)
    running = 1.0
    for t in range(sched.T):
        running *= 1.0 - sched.beta[t]
        assert abs(sched.alpha_bar[t] - running) < 1e-12


# ---------------------------------------------------------------------------
# 前向き過程
# ---------------------------------------------------------------------------

def test_q_sample_without_noise():
    sched = make_schedule(10, 1e-3, 0.3)
    z0 = torch.randn(4, 8, 8, dtype=torch.float64)
    z_t = q_sample(z0, 5, torch.zeros_like(z0), sched)
    assert torch.allclose(z_t, math.sqrt(sched.alpha_bar[4]) * z0)


def test_q_sample_keeps_latent_grid_type():
    sched = make_schedule(10, 1e-3, 0.3)
    z0 = LatentGrid(torch.randn(4, 8, 8), f=4)
    assert isinstance(q_sample(z0, 3, torch.randn(4, 8, 8), sched), LatentGrid)


@pytest.mark.parametrize("t", [0, 11])
def test_q_sample_rejects_out_of_range(t):
    sched = make_schedule(10, 1e-3, 0.3)
    with pytest.raises(ParameterError):
        q_sample(torch.zeros(1), t, torch.zeros(1), sched)


def test_q_sample_marginal_statistics():
    sched = make_schedule(200, 5e-4, 0.1)
    g = torch.Generator().manual_seed(0)
    t = 50
    z0 = torch.full((10_000,), 0.8, dtype=torch.float64)
    z_t = q_sample(z0, t, torch.randn(10_000, generator=g, dtype=torch.float64), sched)
    alpha_bar = sched.alpha_bar[t - 1]
    assert z_t.mean().item() == pytest.approx(math.sqrt(alpha_bar) * 0.8, rel=0.03)
    assert z_t.var().item() == pytest.approx(1 - alpha_bar, rel=0.03)


def test_closed_form_matches_iterated_steps():
    sched = make_schedule(3, 0.1, 0.3)
    g = torch.Generator().manual_seed(1)
    n = 100_000
    z = torch.ones(n, dtype=torch.float64)
    for t in range(3):
        z = math.sqrt(1 - sched.beta[t]) * z + math.sqrt(sched.beta[t]) * torch.randn(n, generator=g, dtype=torch.float64)
    alpha_bar = sched.alpha_bar[-1]
    assert z.mean().item() == pytest.approx(math.sqrt(alpha_bar), rel=0.01)
    assert z.var().item() == pytest.approx(1 - alpha_bar, rel=0.01)


def test_full_chain_reaches_standard_normal():
    sched = make_schedule(200, 5e-4, 0.1)
    g = torch.Generator().manual_seed(2)
    z0 = torch.ones(10_000, dtype=torch.float64)
    z_T = q_sample(z0, sched.T, torch.randn(10_000, generator=g, dtype=torch.float64), sched)
    assert abs(z_T.mean().item()) < 0.05
    assert abs(z_T.std().item() - 1.0) < 0.05


# ---------------------------------------------------------------------------
# 損失・逆過程
# ---------------------------------------------------------------------------

def test_diffusion_loss_values():
    eps = torch.randn(2, 4, 8, 8)
    assert diffusion_loss(eps, eps).item() == 0.0
    assert diffusion_loss(eps, eps + 1).item() == pytest.approx(1.0, abs=1e-6)
    other = torch.randn(2, 4, 8, 8)
    brute = sum(float((a - b) ** 2) for a, b in zip(eps.ravel(), other.ravel())) / eps.numel()
    assert diffusion_loss(eps, other).item() == pytest.approx(brute, rel=1e-5)
    with pytest.raises(ShapeError):
        diffusion_loss(eps, other[:1])


def test_denoise_step_final_is_deterministic_mean():
    sched = make_schedule(10, 1e-3, 0.3)
    z = torch.randn(4, 8, 8, dtype=torch.float64)
    eps_hat = torch.randn(4, 8, 8, dtype=torch.float64)
    a = denoise_step(z, 1, eps_hat, sched, seed=1)
    b = denoise_step(z, 1, eps_hat, sched, seed=2)
    beta, alpha_bar = sched.beta[0], sched.alpha_bar[0]
    mean = (z - beta / math.sqrt(1 - alpha_bar) * eps_hat) / math.sqrt(1 - beta)
    assert torch.equal(a, b)
    assert torch.allclose(a, mean)


def test_denoise_step_small_beta_is_near_identity():
    sched = make_schedule(10, 1e-9, 2e-9)
    z = torch.randn(4, 8, 8, dtype=torch.float64)
    out = denoise_step(z, 5, torch.zeros_like(z), sched, seed=0)
    assert torch.allclose(out, z, atol=1e-3)


def test_denoise_step_rejects_out_of_range():
    sched = make_schedule(10, 1e-3, 0.3)
    with pytest.raises(ParameterError):
        denoise_step(torch.zeros(4, 2, 2), 11, torch.zeros(4, 2, 2), sched)


def test_perfect_noise_recovers_z0():
    sched = make_schedule(200, 5e-4, 0.1)
    z0 = torch.randn(4, 8, 8, dtype=torch.float64)
    eps = torch.randn(4, 8, 8, dtype=torch.float64)
    z_t = q_sample(z0, 120, eps, sched)
    assert torch.norm(predict_x0(z_t, 120, eps, sched) - z0).item() < 1e-5


def test_two_step_sampling_by_hand():
    sched = make_schedule(2, 0.1, 0.2)
    shape = (1, 2, 2, 2)
    z0 = sample_latents(lambda z, t: 0.5 * z, sched, shape, seed=7)

    g = torch.Generator().manual_seed(7)
    z2 = torch.randn(shape, generator=g).double()
    beta, alpha_bar = sched.beta, sched.alpha_bar
    mean2 = (z2 - beta[1] / math.sqrt(1 - alpha_bar[1]) * 0.5 * z2) / math.sqrt(1 - beta[1])
    z1 = mean2 + math.sqrt(beta[1]) * torch.randn(shape, generator=g).double()
    expected = (z1 - beta[0] / math.sqrt(1 - alpha_bar[0]) * 0.5 * z1) / math.sqrt(1 - beta[0])
    assert torch.allclose(z0.double(), expected, atol=1e-5)


def test_sampling_is_batch_invariant():
    sched = make_schedule(5, 1e-3, 0.3)
    batch = sample_latents(lambda z, t: 0.1 * z, sched, (3, 4, 4, 4), seed=[11, 12, 13])
    single = sample_latents(lambda z, t: 0.1 * z, sched, (1, 4, 4, 4), seed=[12])
    assert torch.equal(batch[1], single[0])


# ---------------------------------------------------------------------------
# デノイザー
# ---------------------------------------------------------------------------

def test_attention_rows_sum_to_one():
    q, k, v = torch.randn(2, 2, 5, 4), torch.randn(2, 2, 7, 4), torch.randn(2, 2, 7, 4)
    out, weights = scaled_dot_attention(q, k, v)
    assert out.shape == (2, 2, 5, 4)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 2, 5), atol=1e-5)


def test_attention_is_invariant_to_key_value_order():
    q, k, v = torch.randn(1, 1, 2, 4), torch.randn(1, 1, 2, 4), torch.randn(1, 1, 2, 4)
    perm = torch.tensor([1, 0])
    a, _ = scaled_dot_attention(q, k, v)
    b, _ = scaled_dot_attention(q, k[:, :, perm], v[:, :, perm])
    assert torch.allclose(a, b, atol=1e-6)


def test_cross_attention_without_context_is_identity():
    layer = SpatialAttention(8, num_heads=2, context_dim=16)
    x = torch.randn(2, 8, 4, 4)
    assert torch.equal(layer(x, None), x)


def test_timestep_embeddings_are_distinct():
    emb = timestep_embedding(torch.arange(1, 201), 64)
    assert torch.unique(emb, dim=0).shape[0] == 200


def test_denoiser_output_shape_and_determinism():
    net = DenoiserNet(DenoiserConfig(base_channels=8, time_emb_dim=16, num_heads=2)).eval()
    z = torch.randn(2, 4, 8, 8)
    t = torch.tensor([3, 50])
    out = net(z, t)
    assert out.shape == z.shape
    assert torch.equal(out, net(z, t))


def test_denoiser_requires_mask_channels():
    net = DenoiserNet(DenoiserConfig(mask_channels=4, base_channels=8, time_emb_dim=16, num_heads=2))
    with pytest.raises(ShapeError):
        net(torch.randn(1, 4, 8, 8), torch.tensor([1]))
    assert net(torch.randn(1, 4, 8, 8), torch.tensor([1]), mask=torch.rand(1, 4, 8, 8)).shape == (1, 4, 8, 8)


def test_denoiser_rejects_indivisible_latent():
    net = DenoiserNet(DenoiserConfig(base_channels=8, time_emb_dim=16, num_heads=2))
    with pytest.raises(ShapeError):
        net(torch.randn(1, 4, 6, 6), torch.tensor([1]))


def test_denoiser_config_rejects_inconsistent_channels():
    from pydantic import ValidationError

    with pytest.raises(ValidationError):
        DenoiserConfig(latent_channels=4, mask_channels=4, in_channels=4)


def test_denoiser_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = DenoiserNet(DenoiserConfig(base_channels=8, time_emb_dim=16, num_heads=2, context_dim=8)).double()
    torch.nn.init.normal_(net.conv_out.weight, std=0.1)
    z = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    context = torch.randn(2, 8, dtype=torch.float64)
    t = torch.tensor([2, 9])

    def loss_fn():
        return diffusion_loss(eps, net(z, t, context=context))

    param = net.down_blocks[0].res.conv1.weight
    net.zero_grad()
    loss_fn().backward()
    index = [0, 5, 13, 29, 40]
    analytic = param.grad.reshape(-1)[index].clone()
    numeric = torch.zeros_like(analytic)
    h = 1e-3
    with torch.no_grad():
        flat = param.view(-1)
        for i, k in enumerate(index):
            original = flat[k].item()
            flat[k] = original + h
            plus = loss_fn().item()
            flat[k] = original - h
            minus = loss_fn().item()
            flat[k] = original
            numeric[i] = (plus - minus) / (2 * h)
    assert (torch.norm(analytic - numeric) / torch.norm(analytic)).item() < 1e-2


def test_predict_noise_unconditional_ignores_condition():
    from src.conditioning.condition import assemble_condition

    net = _tiny_model("unconditional")
    torch.nn.init.normal_(net.unet.conv_out.weight, std=0.1)
    z = torch.randn(4, 8, 8)
    labels = np.zeros((32, 32), dtype=np.int64)
    labels[4:12, 4:12] = 1
    cond = assemble_condition(SegMask(labels), None, f=4)
    with torch.no_grad():
        a = predict_noise(net, z, 5, None)
        b = predict_noise(net, z, 5, cond)
        c = net(z[None], torch.tensor([5]), mask=torch.rand(1, 4, 8, 8))
    assert torch.isfinite(a).all()
    assert a.shape == z.shape
    assert torch.equal(a, b)
    assert torch.equal(a, c[0])


# ---------------------------------------------------------------------------
# サンプリング
# ---------------------------------------------------------------------------

def test_sample_is_deterministic(tiny_ae):
    net = _tiny_model("unconditional")
    sched = make_schedule(10, 1e-3, 0.3)
    a = sample(net, sched, None, seed=3, ae_checkpoint=tiny_ae)
    b = sample(net, sched, None, seed=3, ae_checkpoint=tiny_ae)
    assert a.shape == (32, 32)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


def test_sample_images_does_not_depend_on_batch_split(tiny_ae):
    net = _tiny_model("mask")
    sched = make_schedule(10, 1e-3, 0.3)
    masks = []
    for i in range(3):
        labels = np.zeros((32, 32), dtype=np.int64)
        labels[4 + i:12 + i, 8:16] = i + 1
        masks.append(SegMask(labels))
    together = sample_images(net, sched, tiny_ae, [5, 6, 7], masks=masks, batch_size=3)
    apart = sample_images(net, sched, tiny_ae, [5, 6, 7], masks=masks, batch_size=1)
    for a, b in zip(together, apart):
        assert np.allclose(a.pixels, b.pixels, atol=1e-5)
    assert together[1].provenance == "sample-6"


def test_sample_images_checks_counts(tiny_ae):
    net = _tiny_model("mask")
    sched = make_schedule(10, 1e-3, 0.3)
    with pytest.raises(ParameterError):
        sample_images(net, sched, tiny_ae, [1, 2], masks=[SegMask.empty((32, 32))])


# ---------------------------------------------------------------------------
# 学習
# ---------------------------------------------------------------------------

@pytest.fixture
def ae_checkpoint(tmp_path, toy_ds):
    cfg = AutoencoderConfig(base_channels=8, epochs=1, batch_size=4)
    return train_autoencoder(toy_ds, cfg, str(tmp_path / "ae"), seed=0)


def _diffusion_cfg(mode: str, steps: int) -> DiffusionConfig:
    return DiffusionConfig(mode=mode, timesteps=10, beta_start=1e-3, beta_end=0.3, steps=steps,
                           batch_size=8, log_every=1, **TINY_NET)


def test_initial_loss_is_noise_variance(tmp_path, toy_ds, ae_checkpoint):
    train_diffusion(toy_ds, ae_checkpoint, None, _diffusion_cfg("unconditional", 1), str(tmp_path), seed=0)
    log = pd.read_csv(tmp_path / "diffusion_loss.csv")
    assert list(log.columns) == ["step", "loss"]
    assert log["loss"].iloc[0] == pytest.approx(1.0, abs=0.3)


def test_train_and_reload_full_model(tmp_path, toy_ds, ae_checkpoint):
    path = train_diffusion(toy_ds, ae_checkpoint, None, _diffusion_cfg("full", 3), str(tmp_path), seed=0)
    ckpt = load_checkpoint(path, "diffusion")
    assert ckpt.step == 3
    assert ckpt.extra["latent_hw"] == [8, 8]
    assert ckpt.extra["latent_scale"] > 0

    net, sched, ae_path = load_denoiser(path)
    assert sched.T == 10
    assert ae_path.endswith("autoencoder.pt")
    assert float(net.latent_scale) == pytest.approx(ckpt.extra["latent_scale"])
    images = sample_images(net, sched, ae_path, [1], masks=[toy_ds[0].mask], backgrounds=[toy_ds[0].image])
    assert images[0].shape == (32, 32)


def test_resume_continues_steps(tmp_path, toy_ds, ae_checkpoint):
    first = train_diffusion(toy_ds, ae_checkpoint, None, _diffusion_cfg("mask", 2), str(tmp_path), seed=0)
    resumed = train_diffusion(toy_ds, ae_checkpoint, None, _diffusion_cfg("mask", 4), str(tmp_path), seed=0,
                              resume_from=first)
    assert load_checkpoint(resumed).step == 4
    assert list(pd.read_csv(tmp_path / "diffusion_loss.csv")["step"]) == [1, 2, 3, 4]


def test_train_rejects_schedule_mismatch(tmp_path, toy_ds, ae_checkpoint):
    with pytest.raises(ParameterError):
        train_diffusion(toy_ds, ae_checkpoint, make_schedule(20, 1e-3, 0.3), _diffusion_cfg("mask", 1),
                        str(tmp_path))


@pytest.mark.slow
def test_overfit_eight_images(tmp_path, toy_ds):
    ae_cfg = AutoencoderConfig(base_channels=16, epochs=200, batch_size=8, learning_rate=1e-3, target_rec=0.02)
    ae_path = train_autoencoder(toy_ds, ae_cfg, str(tmp_path), seed=0)
    cfg = DiffusionConfig(mode="unconditional", steps=5000, learning_rate=1e-3, log_every=100)
    path = train_diffusion(toy_ds, ae_path, None, cfg, str(tmp_path), seed=0)
    log = pd.read_csv(tmp_path / "diffusion_loss.csv")
    assert log["loss"].iloc[-1] < 0.1

    net, sched, _ = load_denoiser(path)
    generated = sample(net, sched, None, seed=0, ae_checkpoint=ae_path)
    distances = [np.abs(generated.pixels - item.image.pixels).mean() for item in toy_ds]
    assert min(distances) < 0.05


# ---------------------------------------------------------------------------
# 条件付けの効果
# ---------------------------------------------------------------------------

def _noise_background(std: float, seed: int) -> Image2D:
    rng = np.random.default_rng(seed)
    return Image2D(np.clip(0.5 + rng.normal(0, std, (32, 32)), 0, 1).astype(np.float32), preprocessed=True)


def _corner_mask(offset: int) -> SegMask:
    labels = np.zeros((32, 32), dtype=np.int64)
    labels[4 + offset:12 + offset, 4:12] = 1
    return SegMask(labels)


def test_background_swap_check_reports_both_orderings(tiny_ae):
    net = _tiny_model("full")
    torch.nn.init.normal_(net.unet.conv_out.weight, std=0.1)
    sched = make_schedule(10, 1e-3, 0.3)
    backgrounds = [_noise_background(0.01, 0), _noise_background(0.08, 1)]

    check = background_swap_check(net, sched, tiny_ae, _corner_mask(0), backgrounds, seed=1)
    assert len(check["source_std"]) == len(check["generated_std"]) == 2
    assert check["source_std"][0] < check["source_std"][1]
    assert isinstance(check["ordered"], bool)
    assert background_swap_check(net, sched, tiny_ae, _corner_mask(0), backgrounds, seed=1) == check

    result = background_swap_consistency(net, sched, tiny_ae, [_corner_mask(0), _corner_mask(4)], backgrounds, [1, 2])
    assert result["n_pairs"] == 2
    assert result["checks"][0] == check
    assert result["n_ordered"] == sum(c["ordered"] for c in result["checks"])
    assert result["rate"] == pytest.approx(result["n_ordered"] / 2)


def test_background_swap_check_rejects_bad_inputs(tiny_ae):
    sched = make_schedule(10, 1e-3, 0.3)
    backgrounds = [_noise_background(0.01, 0), _noise_background(0.08, 1)]
    with pytest.raises(ParameterError):
        background_swap_check(_tiny_model("mask"), sched, tiny_ae, _corner_mask(0), backgrounds)
    with pytest.raises(ParameterError):
        background_swap_check(_tiny_model("full"), sched, tiny_ae, _corner_mask(0), backgrounds[:1])
    with pytest.raises(ParameterError):
        background_swap_consistency(_tiny_model("full"), sched, tiny_ae, [_corner_mask(0)], backgrounds, [1, 2])


@pytest.mark.slow
def test_conditioning_improves_samples(tmp_path):
    ds = preprocess_dataset(generate_toy_dataset(32, 32, (0.5, 0.3, 0.2), seed=11))
    ae_cfg = AutoencoderConfig(base_channels=16, epochs=100, batch_size=8, learning_rate=1e-3)
    ae_path = train_autoencoder(ds, ae_cfg, str(tmp_path / "ae"), seed=0)
    models = {}
    for mode in ("unconditional", "mask", "full"):
        cfg = DiffusionConfig(mode=mode, steps=3000, learning_rate=1e-3, log_every=500)
        models[mode] = load_denoiser(train_diffusion(ds, ae_path, None, cfg, str(tmp_path / mode), seed=0))
    segmenter = train_segmenter(ds, SegmenterConfig(epochs=30), str(tmp_path / "seg"), seed=0)

    real = [item.image for item in ds]
    masks = ds.masks
    seeds = list(range(len(ds)))
    net, sched, _ = models["mask"]
    no_background = sample_images(net, sched, ae_path, seeds, masks=masks)
    net, sched, _ = models["full"]
    full = sample_images(net, sched, ae_path, seeds, masks=masks, backgrounds=real)
    net, sched, _ = models["unconditional"]
    unconditional = sample_images(net, sched, ae_path, seeds)

    conditional_score = segmentation_score(no_background, masks, segmenter)
    unconditional_score = segmentation_score(unconditional, masks, segmenter)
    assert conditional_score - unconditional_score >= 0.10

    ssim_full = np.mean([ssim(r, g) for r, g in zip(real, full)])
    ssim_no_background = np.mean([ssim(r, g) for r, g in zip(real, no_background)])
    assert ssim_full >= ssim_no_background

    net, sched, _ = models["full"]
    backgrounds = [_noise_background(0.01, 0), _noise_background(0.05, 1)]
    pair_masks = [masks[i % len(masks)] for i in range(50)]
    result = background_swap_consistency(net, sched, ae_path, pair_masks, backgrounds, list(range(50)))
    assert result["rate"] >= 0.9
