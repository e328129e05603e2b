"""
KLオートエンコーダーのテスト
"""

import math

import numpy as np
import pandas as pd
import pytest
import torch
from pydantic import ValidationError

from src.autoencoder.model import AutoencoderConfig, AutoencoderKL
from src.autoencoder.ops import LatentDistribution, LatentGrid, ae_losses, decode, encode, kl_to_standard_normal, sample_latent
from src.autoencoder.trainer import load_autoencoder, train_autoencoder
from src.dataio.types import Dataset, Image2D
from src.models.layers import ResBlock
from src.utils.checkpoint import load_checkpoint
from src.utils.errors import DataError, ShapeError
from src.utils.seeding import seeded_build

SMALL = dict(base_channels=8, epochs=2, batch_size=4, learning_rate=1e-3)


@pytest.fixture
def small_ae():
    return seeded_build(lambda: AutoencoderKL(AutoencoderConfig(**SMALL)), 0).eval()


def _unit_image(size: int = 64, seed: int = 0) -> Image2D:
    rng = np.random.default_rng(seed)
    return Image2D(rng.uniform(0, 1, (size, size)).astype(np.float32), preprocessed=True)


# ---------------------------------------------------------------------------
# 設定・構成
# ---------------------------------------------------------------------------

def test_config_requires_power_of_two():
    with pytest.raises(ValidationError):
        AutoencoderConfig(f=3)


def test_config_blocks_must_match_f():
    assert AutoencoderConfig(f=4).num_down_blocks == 2
    with pytest.raises(ValidationError):
        AutoencoderConfig(f=4, num_down_blocks=3)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        AutoencoderConfig(latent_size=8)


def test_resblock_has_three_convolutions():
    block = ResBlock(8, 16)
    convs = [m for name, m in block.named_children() if name.startswith("conv")]
    assert len(convs) == 3
    x = torch.randn(2, 8, 8, 8)
    assert block(x).shape == (2, 16, 8, 8)


# ---------------------------------------------------------------------------
# encode / sample_latent / decode
# ---------------------------------------------------------------------------

def test_encode_shape(small_ae):
    d = encode(small_ae, _unit_image(64))
    assert tuple(d.mean.shape) == (4, 16, 16)
    assert tuple(d.log_variance.shape) == (4, 16, 16)


def test_encode_is_deterministic_and_finite(small_ae):
    x = _unit_image(32, seed=1)
    a, b = encode(small_ae, x), encode(small_ae, x)
    assert torch.equal(a.mean, b.mean)
    assert torch.equal(a.log_variance, b.log_variance)
    assert torch.isfinite(a.mean).all() and torch.isfinite(a.log_variance).all()


def test_encode_rejects_indivisible_size(small_ae):
    with pytest.raises(ShapeError):
        encode(small_ae, _unit_image(30))


def test_sample_latent_with_clamped_variance_returns_mean():
    mean = torch.randn(4, 8, 8)
    d = LatentDistribution(mean, torch.full((4, 8, 8), -1e9))
    assert d.log_variance.min().item() == -30.0
    z = sample_latent(d, noise_seed=5)
    assert torch.allclose(z.values, mean, atol=1e-6)


def test_sample_latent_is_seeded():
    d = LatentDistribution(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4))
    assert torch.equal(sample_latent(d, 3).values, sample_latent(d, 3).values)
    assert not torch.equal(sample_latent(d, 3).values, sample_latent(d, 4).values)


def test_sample_latent_std_matches_log_variance():
    log_var = math.log(4.0)
    d = LatentDistribution(torch.zeros(1, 100, 100), torch.full((1, 100, 100), log_var))
    z = sample_latent(d, noise_seed=0).values
    assert z.std().item() == pytest.approx(math.exp(0.5 * log_var), rel=0.05)


def test_decode_shape_and_range(small_ae):
    z = LatentGrid(torch.randn(4, 16, 16) * 3, f=4)
    out = decode(small_ae, z)
    assert out.shape == (64, 64)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    assert out.preprocessed


def test_decode_rejects_wrong_channels(small_ae):
    with pytest.raises(ShapeError):
        decode(small_ae, LatentGrid(torch.randn(3, 8, 8), f=4))


def test_latent_grid_rejects_non_finite():
    values = torch.zeros(4, 2, 2)
    values[0, 0, 0] = float("nan")
    with pytest.raises(ShapeError):
        LatentGrid(values, f=4)


def test_encode_decode_preserves_size(small_ae):
    for size in (16, 32, 64):
        d = encode(small_ae, _unit_image(size))
        assert decode(small_ae, LatentGrid(d.mean, 4)).shape == (size, size)


# ---------------------------------------------------------------------------
# 損失
# ---------------------------------------------------------------------------

def test_losses_are_zero_for_perfect_reconstruction():
    x = torch.rand(1, 1, 8, 8)
    d = LatentDistribution(torch.zeros(4, 2, 2), torch.zeros(4, 2, 2))
    l_rec, l_reg, total = ae_losses(x, x.clone(), d, w_kl=1e-6)
    assert l_rec.item() == 0.0
    assert l_reg.item() == pytest.approx(0.0, abs=1e-12)
    assert total.item() == pytest.approx(0.0, abs=1e-12)


def test_reconstruction_loss_constant_offset():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    d = LatentDistribution(torch.zeros(4, 2, 2), torch.zeros(4, 2, 2))
    l_rec, _, _ = ae_losses(x, x + 0.1, d, w_kl=0.0)
    assert l_rec.item() == pytest.approx(0.1, abs=1e-9)


def test_kl_closed_form_value():
    d = LatentDistribution(torch.ones(4, 2, 2), torch.zeros(4, 2, 2))
    _, l_reg, _ = ae_losses(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), d, w_kl=1.0)
    assert l_reg.item() == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    mean, sigma = 2.0, 0.5
    closed = kl_to_standard_normal(torch.tensor([mean], dtype=torch.float64),
                                   torch.tensor([math.log(sigma ** 2)], dtype=torch.float64)).item()
    g = torch.Generator().manual_seed(0)
    z = mean + sigma * torch.randn(100_000, generator=g, dtype=torch.float64)
    log_q = -0.5 * math.log(2 * math.pi * sigma ** 2) - (z - mean) ** 2 / (2 * sigma ** 2)
    log_p = -0.5 * math.log(2 * math.pi) - z ** 2 / 2
    assert (log_q - log_p).mean().item() == pytest.approx(closed, rel=0.01)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = AutoencoderKL(AutoencoderConfig(base_channels=8)).double()
    x = torch.rand(2, 1, 32, 32, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        mean, log_variance = model.encode_moments(x)
        x_hat = model.decode_tensor(mean, clamp=False)
        return torch.mean(torch.abs(x - x_hat)) + 1e-2 * kl_to_standard_normal(mean, log_variance)

    param = model.decoder.conv_out.weight
    model.zero_grad()
    loss_fn().backward()
    flat_index = [0, 3, 7, 11, 17]
    analytic = param.grad.reshape(-1)[flat_index].clone()

    numeric = torch.zeros_like(analytic)
    h = 1e-3
    with torch.no_grad():
        flat = param.view(-1)
        for i, index in enumerate(flat_index):
            original = flat[index].item()
            flat[index] = original + h
            plus = loss_fn().item()
            flat[index] = original - h
            minus = loss_fn().item()
            flat[index] = original
            numeric[i] = (plus - minus) / (2 * h)
    assert (torch.norm(analytic - numeric) / torch.norm(analytic)).item() < 1e-2


# ---------------------------------------------------------------------------
# 学習
# ---------------------------------------------------------------------------

def test_train_writes_checkpoint_and_loss_log(tmp_path, toy_ds):
    cfg = AutoencoderConfig(**SMALL)
    path = train_autoencoder(toy_ds, cfg, str(tmp_path), seed=0)
    log = pd.read_csv(tmp_path / "autoencoder_loss.csv")
    assert list(log.columns) == ["epoch", "L_rec", "L_reg", "total"]
    assert list(log["epoch"]) == [1, 2]
    assert load_checkpoint(path, "autoencoder").epoch == 2

    model = load_autoencoder(path)
    d = encode(model, toy_ds[0].image)
    assert tuple(d.mean.shape) == (4, 8, 8)


def test_train_is_reproducible(tmp_path, toy_ds):
    cfg = AutoencoderConfig(**SMALL)
    a = load_checkpoint(train_autoencoder(toy_ds, cfg, str(tmp_path / "a"), seed=4))
    b = load_checkpoint(train_autoencoder(toy_ds, cfg, str(tmp_path / "b"), seed=4))
    for name, tensor in a.tensors.items():
        assert torch.equal(tensor, b.tensors[name]), name


def test_resume_continues_epochs(tmp_path, toy_ds):
    cfg = AutoencoderConfig(**SMALL)
    first = train_autoencoder(toy_ds, cfg, str(tmp_path), seed=0)
    before = load_checkpoint(first).losses["L_rec"]
    resumed = train_autoencoder(toy_ds, cfg.model_copy(update={"epochs": 3}), str(tmp_path), seed=0,
                                resume_from=first)
    ckpt = load_checkpoint(resumed)
    assert ckpt.epoch == 3
    assert list(pd.read_csv(tmp_path / "autoencoder_loss.csv")["epoch"]) == [1, 2, 3]
    assert ckpt.losses["L_rec"] < before * 1.5


def test_train_rejects_empty_dataset(tmp_path):
    with pytest.raises(DataError):
        train_autoencoder(Dataset([]), AutoencoderConfig(**SMALL), str(tmp_path))


@pytest.mark.slow
def test_overfit_eight_images(tmp_path, toy_ds):
    cfg = AutoencoderConfig(base_channels=16, epochs=200, batch_size=8, learning_rate=1e-3, target_rec=0.02)
    path = train_autoencoder(toy_ds, cfg, str(tmp_path), seed=0)
    assert load_checkpoint(path).losses["L_rec"] < 0.02
