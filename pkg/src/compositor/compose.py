"""
大規模合成マップの作成
生成クロップから天体を切り出し、背景雑音に合わせてスケーリングして配置する
"""

import logging
import os
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from ..augment.mask_ddpm import synthesize_masks
from ..augment.pairs import generate_pairs
from ..dataio.fits_io import read_fits_cutout, write_fits_cutout
from ..dataio.preprocessing import default_scale, preprocess
from ..dataio.types import Dataset, Image2D, SegMask
from ..diffusion.model import RADiffModel
from ..utils.errors import ParameterError
from ..utils.seeding import derive_seed
from .canvas import SkyCanvas, cut_background_patch, place_objects, write_catalog
from .flux import FluxModel, measure_background_sigma, rescale_flux
from .stamps import extract_objects

logger = logging.getLogger(__name__)

# (masks, backgrounds, seed) -> 生成クロップとマスクの組
CropGenerator = Callable[[Sequence[SegMask], Sequence[Image2D], int], Dataset]
MaskSource = Union[str, Sequence[SegMask], Callable[[int, int], Sequence[SegMask]]]


def _draw_masks(mask_source: MaskSource, n: int, seed: int) -> Sequence[SegMask]:
    if callable(mask_source):
        return list(mask_source(n, seed))
    if isinstance(mask_source, str):
        return synthesize_masks(mask_source, n, seed=seed)
    if not mask_source:
        raise ParameterError("マスクの供給元が空です")
    picks = np.random.default_rng(seed).integers(0, len(mask_source), size=n)
    return [mask_source[int(i)] for i in picks]


def compose_map(
    bg_path: str,
    radiff_ckpt: Union[str, RADiffModel, None],
    mask_source: MaskSource,
    n_crops: int,
    fm: Optional[FluxModel] = None,
    overlap: float = 0.0,
    seed: int = 0,
    out_dir: str = ".",
    crop_generator: Optional[CropGenerator] = None,
) -> Tuple[SkyCanvas, str]:
    """
    背景マップにn_crops枚分の生成天体を注入する

    Args:
        bg_path (str): 背景マップ (FITS)
        radiff_ckpt: 拡散モデルのチェックポイント (crop_generatorを渡す場合は不要)
        mask_source: マスクDDPMのチェックポイントパス、マスクのリスト、または (n, seed) -> マスク
        n_crops (int): 生成するクロップ数
        fm (Optional[FluxModel]): フラックスモデル (sigma_bgが未設定なら背景から推定)
        overlap (float): 許容する重なりの割合
        seed (int): シード
        out_dir (str): 出力先 (synthetic_map.fits と catalog.json)
        crop_generator: クロップ生成関数 (Noneなら拡散モデルで生成)

    Returns:
        Tuple[SkyCanvas, str]: 合成マップとカタログのパス
    """
    if n_crops < 0:
        raise ParameterError("n_cropsは0以上である必要があります", str(n_crops))
    fm = fm or FluxModel()
    background = read_fits_cutout(bg_path)
    canvas = SkyCanvas.from_image(background)

    if n_crops > 0:
        if fm.sigma_bg is None:
            fm = fm.model_copy(update={"sigma_bg": measure_background_sigma(background)})
        masks = _draw_masks(mask_source, n_crops, derive_seed(seed, "masks"))
        size = masks[0].shape[0]
        patch_rng = np.random.default_rng(derive_seed(seed, "patches"))
        patches = []
        for _ in range(n_crops):
            raw = cut_background_patch(background, size, patch_rng)
            patches.append(preprocess(raw, default_scale(raw)))

        if crop_generator is None:
            def crop_generator(m, b, s):
                return generate_pairs(m, radiff_ckpt, b, s, mask_source="compose")
        crops = crop_generator(masks, patches, derive_seed(seed, "crops"))

        stamps = []
        for item in crops:
            stamps.extend(extract_objects(item.image, item.mask, crop_id=item.item_id))
        k_rng = np.random.default_rng(derive_seed(seed, "flux"))
        scaled = [rescale_flux(stamp, fm, k_rng) for stamp in stamps]
        logger.info(f"切り出した天体: {len(scaled)}個 ({len(crops)}クロップ)")
        if scaled:
            canvas = place_objects(canvas, scaled, overlap, derive_seed(seed, "placement"))
        else:
            logger.warning("生成クロップに天体がありません")

    os.makedirs(out_dir, exist_ok=True)
    map_path = os.path.join(out_dir, "synthetic_map.fits")
    write_fits_cutout(map_path, Image2D(canvas.pixels, provenance="synthetic_map"))
    catalog_path = write_catalog(canvas, os.path.join(out_dir, "catalog.json"))
    logger.info(f"合成マップ保存: {map_path}", extra={"n_objects": len(canvas.catalog)})
    return canvas, catalog_path
