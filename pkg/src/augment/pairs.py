"""
マスクから画像を生成して画像-マスクの組を作る
"""

import logging
import os
from typing import Optional, Sequence, Union

import numpy as np

from ..autoencoder.model import AutoencoderKL
from ..dataio.types import Cutout, Dataset, Image2D, SegMask
from ..diffusion.model import RADiffModel
from ..diffusion.sampling import sample_images
from ..diffusion.schedule import NoiseSchedule
from ..diffusion.trainer import load_denoiser
from ..utils.errors import DependencyError, ParameterError
from ..utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def generate_pairs(
    masks: Sequence[SegMask],
    radiff_ckpt: Union[str, RADiffModel],
    background_pool: Sequence[Image2D],
    seed: int = 0,
    sched: Optional[NoiseSchedule] = None,
    ae_checkpoint: Union[str, AutoencoderKL, None] = None,
    mask_source: str = "synthetic",
    batch_size: int = 16,
) -> Dataset:
    """
    各マスクを条件に1枚ずつ画像を生成

    背景条件はプールから一様に選ぶ。各組のmetaに mask_source / background_source / seed を記録する。

    Args:
        masks (Sequence[SegMask]): 条件マスク
        radiff_ckpt: 学習済み拡散モデルまたはそのチェックポイントパス
        background_pool (Sequence[Image2D]): 背景候補
        seed (int): シード
        sched (Optional[NoiseSchedule]): モデルを直接渡す場合のスケジュール
        ae_checkpoint: オートエンコーダー (Noneなら拡散チェックポイントに記録されたもの)
        mask_source (str): マスクの由来 (synthetic / real など)

    Returns:
        Dataset: len(masks) 組
    """
    if not masks:
        return Dataset([])
    if not background_pool:
        raise ParameterError("背景プールが空です")

    if isinstance(radiff_ckpt, str):
        if not os.path.exists(radiff_ckpt):
            raise DependencyError("拡散モデルのチェックポイントが見つかりません", radiff_ckpt)
        net, sched, recorded_ae = load_denoiser(radiff_ckpt)
        ae_checkpoint = ae_checkpoint or recorded_ae
    else:
        net = radiff_ckpt
    if sched is None:
        raise ParameterError("スケジュールが指定されていません")
    if not ae_checkpoint or (isinstance(ae_checkpoint, str) and not os.path.exists(ae_checkpoint)):
        raise DependencyError("オートエンコーダーのチェックポイントが見つかりません", str(ae_checkpoint))

    rng = np.random.default_rng(derive_seed(seed, "backgrounds"))
    picks = rng.integers(0, len(background_pool), size=len(masks))
    seeds = [derive_seed(seed, f"pair-{i}") for i in range(len(masks))]
    backgrounds = [background_pool[int(p)] for p in picks] if net.cfg.uses_background else None

    images = sample_images(net, sched, ae_checkpoint, seeds, masks=masks, backgrounds=backgrounds, batch_size=batch_size)
    items = []
    for i, (image, mask) in enumerate(zip(images, masks)):
        meta = {
            "item_id": f"{mask_source}_{i:05d}",
            "mask_source": mask_source,
            "background_source": background_pool[int(picks[i])].provenance,
            "seed": seeds[i],
        }
        items.append(Cutout(image, mask, meta))
    logger.info(f"画像-マスク組を生成: {len(items)}組", extra={"mask_source": mask_source})
    return Dataset(items)
