"""
ノイズスケジュールと前向き/逆向き拡散の1ステップ
タイムステップtは1始まり (t ∈ [1, T])
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from ..autoencoder.ops import LatentGrid
from ..utils.errors import ParameterError, ShapeError
from ..utils.seeding import torch_generator

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]
NoiseSource = Union[int, torch.Generator, Sequence[torch.Generator], None]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """線形βスケジュール (α_t = 1 − β_t, ᾱ_t = Π α_s)"""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def check(self, t: Timestep) -> None:
        values = t if isinstance(t, torch.Tensor) else torch.tensor([t])
        if values.numel() == 0 or int(values.min()) < 1 or int(values.max()) > self.T:
            raise ParameterError(f"タイムステップは[1, {self.T}]の範囲である必要があります", str(t))

    def gather(self, name: str, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """t (スカラーまたは(B,)) の係数を like にブロードキャスト可能な形で返す"""
        table = torch.as_tensor(getattr(self, name), dtype=torch.float64)
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            values = table[t.long().cpu() - 1].to(like.dtype).to(like.device)
            return values.reshape(-1, *([1] * (like.dim() - 1)))
        return table[int(t) - 1].to(like.dtype).to(like.device)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    両端を含む線形βスケジュールを作成

    Args:
        T (int): タイムステップ数 (2以上)
        beta_start (float): β_1
        beta_end (float): β_T

    Returns:
        NoiseSchedule: β, α, ᾱ
    """
    if T < 2:
        raise ParameterError("Tは2以上である必要があります", str(T))
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ParameterError("0 < beta_start < beta_end < 1 である必要があります", f"({beta_start}, {beta_end})")

    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] >= 0.01:
        logger.warning(f"ᾱ_T={alpha_bar[-1]:.4g} が0.01以上です (終端が標準正規に近づきません)")
    for array in (beta, alpha, alpha_bar):
        array.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar)


def _unwrap(z: Union[LatentGrid, torch.Tensor]) -> torch.Tensor:
    return z.values if isinstance(z, LatentGrid) else z


def _rewrap(template: Union[LatentGrid, torch.Tensor], values: torch.Tensor):
    return LatentGrid(values, template.f) if isinstance(template, LatentGrid) else values


def q_sample(
    z0: Union[LatentGrid, torch.Tensor],
    t: Timestep,
    eps: torch.Tensor,
    sched: NoiseSchedule,
):
    """
    z_t = sqrt(ᾱ_t)·z0 + sqrt(1−ᾱ_t)·ε
    """
    sched.check(t)
    x0 = _unwrap(z0)
    eps = _unwrap(eps)
    if x0.shape != eps.shape:
        raise ShapeError("z0とεの形状が一致しません", f"{tuple(x0.shape)} != {tuple(eps.shape)}")
    alpha_bar = sched.gather("alpha_bar", t, x0)
    return _rewrap(z0, torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps)


def predict_x0(z_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """(z_t − sqrt(1−ᾱ_t)·ε̂) / sqrt(ᾱ_t)"""
    sched.check(t)
    z = _unwrap(z_t)
    alpha_bar = sched.gather("alpha_bar", t, z)
    return (z - torch.sqrt(1.0 - alpha_bar) * _unwrap(eps_hat)) / torch.sqrt(alpha_bar)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """ノイズ予測の平均二乗誤差"""
    eps, eps_hat = _unwrap(eps), _unwrap(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ShapeError("εとε̂の形状が一致しません", f"{tuple(eps.shape)} != {tuple(eps_hat.shape)}")
    return torch.mean((eps - eps_hat) ** 2)


def denoise_step(
    z_t: Union[LatentGrid, torch.Tensor],
    t: int,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    seed: NoiseSource = None,
):
    """
    逆拡散の1ステップ

    μ = (z_t − β_t/sqrt(1−ᾱ_t)·ε̂) / sqrt(α_t)、分散はβ_t·Iに固定。
    t=1では雑音を加えずμを返す。

    Args:
        z_t: 現在の潜在
        t (int): タイムステップ
        eps_hat: 予測ノイズ
        sched (NoiseSchedule): スケジュール
        seed: 整数シードまたはtorch.Generator

    Returns:
        z_{t−1}
    """
    sched.check(t)
    z = _unwrap(z_t)
    eps_hat = _unwrap(eps_hat)
    if z.shape != eps_hat.shape:
        raise ShapeError("z_tとε̂の形状が一致しません", f"{tuple(z.shape)} != {tuple(eps_hat.shape)}")

    beta = sched.gather("beta", t, z)
    alpha = sched.gather("alpha", t, z)
    alpha_bar = sched.gather("alpha_bar", t, z)
    mean = (z - beta / torch.sqrt(1.0 - alpha_bar) * eps_hat) / torch.sqrt(alpha)
    if int(t) == 1:
        return _rewrap(z_t, mean)

    eta = standard_normal(z.shape, seed, z.dtype).to(z.device)
    return _rewrap(z_t, mean + torch.sqrt(beta) * eta)


def standard_normal(shape, seed: NoiseSource, dtype=torch.float32) -> torch.Tensor:
    """
    標準正規乱数

    seedがGeneratorの列のときはバッチの各要素を対応するGeneratorから引く
    (バッチ分割によらず各サンプルの乱数列が変わらない)。
    """
    if isinstance(seed, (list, tuple)):
        if len(seed) != shape[0]:
            raise ShapeError("Generatorの数がバッチサイズと一致しません", f"{len(seed)} != {shape[0]}")
        return torch.stack([torch.randn(tuple(shape[1:]), generator=g, dtype=dtype) for g in seed])
    generator = seed if isinstance(seed, torch.Generator) else torch_generator(seed or 0)
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)
