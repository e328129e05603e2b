"""
オートエンコーダーの推論操作と損失
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch

from ..dataio.types import Image2D
from ..utils.errors import ShapeError
from ..utils.seeding import torch_generator
from .model import LOGVAR_MAX, LOGVAR_MIN, AutoencoderKL


@dataclass
class LatentGrid:
    """
    潜在表現z

    values はtorchの慣習に合わせてチャネル先頭 (c_z, h, w) で保持する。
    """

    values: torch.Tensor
    f: int

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeError("潜在グリッドは3次元 (c_z, h, w) である必要があります", str(tuple(self.values.shape)))
        if not torch.isfinite(self.values).all():
            raise ShapeError("潜在グリッドに非有限値が含まれています")

    @property
    def shape(self) -> Tuple[int, int, int]:
        c, h, w = self.values.shape
        return (h, w, c)


@dataclass
class LatentDistribution:
    """対角ガウス分布 (対数分散は[-30, 20]にクランプ)"""

    mean: torch.Tensor
    log_variance: torch.Tensor
    f: int = 4

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError("平均と対数分散の形状が一致しません")
        self.log_variance = torch.clamp(self.log_variance, LOGVAR_MIN, LOGVAR_MAX)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)


def _image_tensor(x: Union[Image2D, torch.Tensor]) -> torch.Tensor:
    if isinstance(x, Image2D):
        return torch.from_numpy(x.pixels.astype(np.float32))[None, None]
    return x


def encode(model: AutoencoderKL, x: Image2D) -> LatentDistribution:
    """
    画像を潜在分布に写像

    Args:
        model (AutoencoderKL): オートエンコーダー
        x (Image2D): 前処理済み画像

    Returns:
        LatentDistribution: 形状 (c_z, H/f, W/f) の平均と対数分散
    """
    f = model.cfg.f
    if x.height % f or x.width % f:
        raise ShapeError(f"画像サイズが圧縮率f={f}で割り切れません", str(x.shape))
    device = next(model.parameters()).device
    with torch.no_grad():
        mean, log_variance = model.encode_moments(_image_tensor(x).to(device))
    return LatentDistribution(mean[0].cpu(), log_variance[0].cpu(), f)


def sample_latent(d: LatentDistribution, noise_seed: int) -> LatentGrid:
    """z = mean + exp(0.5·log_variance)·ε (εはシード固定の標準正規)"""
    noise = torch.randn(d.mean.shape, generator=torch_generator(noise_seed), dtype=d.mean.dtype)
    return LatentGrid(d.mean + d.std * noise, d.f)


def decode(model: AutoencoderKL, z: LatentGrid, provenance: str = "decoded") -> Image2D:
    """
    潜在表現を画像に戻す (出力は[0,1]にクランプ)
    """
    cfg = model.cfg
    if z.values.shape[0] != cfg.c_z or z.f != cfg.f:
        raise ShapeError("潜在グリッドの形状が設定と一致しません", f"{tuple(z.values.shape)}, f={z.f}")
    device = next(model.parameters()).device
    with torch.no_grad():
        out = model.decode_tensor(z.values[None].to(device))
    return Image2D(out[0, 0].cpu().numpy(), provenance=provenance, preprocessed=True)


def kl_to_standard_normal(mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, var) || N(0,1)) の要素平均 (閉形式)"""
    return -0.5 * torch.mean(1.0 + log_variance - mean.pow(2) - log_variance.exp())


def ae_losses(
    x: Union[Image2D, torch.Tensor],
    x_hat: Union[Image2D, torch.Tensor],
    d: LatentDistribution,
    w_kl: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    再構成損失 (平均絶対誤差) と KL正則化

    Returns:
        Tuple[torch.Tensor, torch.Tensor, torch.Tensor]: (L_rec, L_reg, total)
    """
    x_t, x_hat_t = _image_tensor(x), _image_tensor(x_hat)
    if x_t.shape != x_hat_t.shape:
        raise ShapeError("入力と再構成の形状が一致しません", f"{tuple(x_t.shape)} != {tuple(x_hat_t.shape)}")
    l_rec = torch.mean(torch.abs(x_t - x_hat_t))
    l_reg = kl_to_standard_normal(d.mean, d.log_variance)
    return l_rec, l_reg, l_rec + w_kl * l_reg
