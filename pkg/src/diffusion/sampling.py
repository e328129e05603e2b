"""
逆拡散サンプリング
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..autoencoder.model import AutoencoderKL
from ..autoencoder.trainer import load_autoencoder
from ..conditioning.condition import ConditionBundle, encode_mask
from ..dataio.types import Image2D, SegMask
from ..utils.errors import ParameterError
from ..utils.seeding import torch_generator
from .model import RADiffModel, predict_noise
from .schedule import NoiseSchedule, NoiseSource, denoise_step, standard_normal

logger = logging.getLogger(__name__)

PredictFn = Callable[[torch.Tensor, int], torch.Tensor]


def sample_latents(
    predict_fn: PredictFn,
    sched: NoiseSchedule,
    shape: Tuple[int, ...],
    seed: Union[int, Sequence[int]],
) -> torch.Tensor:
    """
    z_T ~ N(0, I) から t = T..1 の順に denoise_step を適用

    Args:
        predict_fn: (z_t, t) -> ε̂
        sched (NoiseSchedule): スケジュール
        shape: 潜在の形状 (バッチ次元を含む)
        seed: 整数シード、またはバッチ要素ごとのシード列

    Returns:
        torch.Tensor: z_0
    """
    noise: NoiseSource
    if isinstance(seed, (list, tuple)):
        noise = [torch_generator(s) for s in seed]
    else:
        noise = torch_generator(int(seed))
    z = standard_normal(shape, noise)
    for t in range(sched.T, 0, -1):
        eps_hat = predict_fn(z, t)
        z = denoise_step(z, t, eps_hat.to(z.dtype), sched, noise)
    return z


def _as_autoencoder(ae_checkpoint: Union[str, AutoencoderKL], device: str) -> AutoencoderKL:
    if isinstance(ae_checkpoint, AutoencoderKL):
        return ae_checkpoint
    return load_autoencoder(ae_checkpoint, device)


def decode_latents(ae: AutoencoderKL, z: torch.Tensor, latent_scale: float, provenance: str) -> List[Image2D]:
    with torch.no_grad():
        images = ae.decode_tensor((z / latent_scale).to(next(ae.parameters()).device))
    return [
        Image2D(img[0].cpu().numpy(), provenance=f"{provenance}:{i}", preprocessed=True)
        for i, img in enumerate(images)
    ]


def sample(
    net: RADiffModel,
    sched: NoiseSchedule,
    cond: Optional[ConditionBundle],
    seed: int,
    ae_checkpoint: Union[str, AutoencoderKL],
) -> Image2D:
    """
    1枚の画像を生成

    Args:
        net (RADiffModel): 学習済みモデル
        sched (NoiseSchedule): スケジュール
        cond (Optional[ConditionBundle]): 条件 (空なら無条件)
        seed (int): シード
        ae_checkpoint: オートエンコーダーまたはそのチェックポイントパス

    Returns:
        Image2D: 生成画像 ([0,1])
    """
    device = next(net.parameters()).device
    ae = _as_autoencoder(ae_checkpoint, str(device))
    hw = cond.latent_shape if cond is not None and cond.latent_shape else net.latent_hw
    shape = (1, net.latent_channels, *hw)

    net.eval()
    with torch.no_grad():
        z0 = sample_latents(lambda z, t: predict_noise(net, z, t, cond).cpu(), sched, shape, seed)
    return decode_latents(ae, z0, float(net.latent_scale), f"sample-{seed}")[0]


def sample_images(
    net: RADiffModel,
    sched: NoiseSchedule,
    ae_checkpoint: Union[str, AutoencoderKL],
    seeds: Sequence[int],
    masks: Optional[Sequence[SegMask]] = None,
    backgrounds: Optional[Sequence[Image2D]] = None,
    batch_size: int = 16,
) -> List[Image2D]:
    """
    複数枚をバッチで生成 (各画像の乱数列はシードごとに独立なので結果はバッチ分割に依存しない)

    Args:
        net (RADiffModel): 学習済みモデル
        sched (NoiseSchedule): スケジュール
        ae_checkpoint: オートエンコーダーまたはそのチェックポイントパス
        seeds (Sequence[int]): 画像ごとのシード
        masks (Optional[Sequence[SegMask]]): 条件マスク
        backgrounds (Optional[Sequence[Image2D]]): 背景条件画像

    Returns:
        List[Image2D]: 生成画像
    """
    n = len(seeds)
    if masks is not None and len(masks) != n:
        raise ParameterError("マスク数とシード数が一致しません", f"{len(masks)} != {n}")
    if backgrounds is not None and len(backgrounds) != n:
        raise ParameterError("背景数とシード数が一致しません", f"{len(backgrounds)} != {n}")

    device = next(net.parameters()).device
    ae = _as_autoencoder(ae_checkpoint, str(device))
    net.eval()

    results: List[Image2D] = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        batch_seeds = [int(s) for s in seeds[start:stop]]
        mask_t = bg_t = None
        hw = net.latent_hw
        if masks is not None:
            mask_t = torch.stack([encode_mask(m, net.f).values for m in masks[start:stop]]).to(device)
            hw = tuple(mask_t.shape[-2:])
        if backgrounds is not None:
            bg_t = torch.from_numpy(
                np.stack([b.pixels for b in backgrounds[start:stop]])[:, None].astype(np.float32)
            ).to(device)

        def predict(z: torch.Tensor, t: int) -> torch.Tensor:
            t_tensor = torch.full((z.shape[0],), t, dtype=torch.long, device=device)
            return net(z.to(device), t_tensor, mask=mask_t, background=bg_t).cpu()

        with torch.no_grad():
            z0 = sample_latents(predict, sched, (len(batch_seeds), net.latent_channels, *hw), batch_seeds)
        images = decode_latents(ae, z0, float(net.latent_scale), "sample")
        for image, s in zip(images, batch_seeds):
            image.provenance = f"sample-{s}"
        results.extend(images)
        logger.info(f"サンプリング {stop}/{n}")
    return results
