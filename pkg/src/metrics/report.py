"""
評価レポート
"""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from ..autoencoder.model import AutoencoderKL
from ..autoencoder.trainer import load_autoencoder
from ..conditioning.condition import assemble_condition
from ..dataio.types import Image2D, SegMask
from ..diffusion.model import RADiffModel
from ..diffusion.sampling import sample
from ..diffusion.schedule import NoiseSchedule
from ..models.extractor import FeatureExtractor
from ..models.segmenter import SegmenterNet
from ..utils.errors import ParameterError, ShapeError
from .features import extract_features
from .fid import fid
from .segmentation import mean_iou, segment_images
from .ssim import ssim

logger = logging.getLogger(__name__)


class MetricReport(BaseModel):
    """計算しなかった指標はNoneで、not_computedに理由を記録する"""

    fid: Optional[float] = None
    ssim: Optional[float] = None
    seg_score: Optional[float] = None
    iou_per_class: Dict[str, float] = Field(default_factory=dict)
    per_image_ssim: List[float] = Field(default_factory=list)
    per_image_iou: List[float] = Field(default_factory=list)
    n_real: int = 0
    n_generated: int = 0
    not_computed: Dict[str, str] = Field(default_factory=dict)

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.model_dump(mode="json"), indent=2, ensure_ascii=False, sort_keys=True)
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
            logger.info(f"評価レポート保存: {path}")
        return text


def evaluate(
    real: Sequence[Image2D],
    generated: Sequence[Image2D],
    extractor: Union[str, FeatureExtractor, None] = None,
    segmenter: Union[str, SegmenterNet, None] = None,
    gt_masks: Optional[Sequence[SegMask]] = None,
) -> MetricReport:
    """
    FID・SSIM・セグメンテーションスコアをまとめて計算

    SSIMは real[i] と generated[i] の対で計算する (generated[i] は real[i] のマスクから生成したもの)。

    Args:
        real: 実画像
        generated: 生成画像
        extractor: 特徴抽出器 (NoneならFIDは計算しない)
        segmenter: セグメンター (Noneならセグメンテーションスコアは計算しない)
        gt_masks: 生成に使ったマスク

    Returns:
        MetricReport: 評価結果
    """
    report = MetricReport(n_real=len(real), n_generated=len(generated))

    if extractor is None:
        report.not_computed["fid"] = "特徴抽出器が指定されていません"
    else:
        report.fid = fid(extract_features(extractor, real), extract_features(extractor, generated))

    if len(real) == len(generated) and real:
        report.per_image_ssim = [ssim(r, g) for r, g in zip(real, generated)]
        report.ssim = float(np.mean(report.per_image_ssim))
    else:
        report.not_computed["ssim"] = "実画像と生成画像が対になっていません"

    if segmenter is None or gt_masks is None:
        report.not_computed["seg_score"] = "セグメンターまたは条件マスクがありません"
    else:
        if len(gt_masks) != len(generated):
            raise ShapeError("条件マスクと生成画像の枚数が一致しません", f"{len(gt_masks)} != {len(generated)}")
        preds = segment_images(segmenter, generated)
        K = gt_masks[0].num_classes if gt_masks else None
        table, report.seg_score, report.per_image_iou = mean_iou(preds, gt_masks, K, include_background=False)
        report.iou_per_class = {str(k): v for k, v in table.items()}

    logger.info(
        "評価完了",
        extra={"fid": report.fid, "ssim": report.ssim, "seg_score": report.seg_score},
    )
    return report


def off_source_std(image: Image2D, mask: SegMask) -> float:
    """マスクの背景画素 (ラベル0) の標準偏差"""
    if image.shape != mask.shape:
        raise ShapeError("画像とマスクの形状が一致しません", f"{image.shape} != {mask.shape}")
    background = image.pixels[mask.labels == 0]
    if background.size < 2:
        raise ParameterError("背景画素が不足しています", str(background.size))
    return float(np.std(background))


def background_swap_check(
    net: RADiffModel,
    sched: NoiseSchedule,
    ae: Union[str, AutoencoderKL],
    mask: SegMask,
    backgrounds: Sequence[Image2D],
    seed: int = 0,
) -> Dict[str, object]:
    """
    同じシード・同じマスクで背景条件だけを替えて生成し、背景画素のばらつきの順序を比べる

    Args:
        net (RADiffModel): full モードで学習したモデル
        sched (NoiseSchedule): スケジュール
        ae: オートエンコーダーまたはそのチェックポイントパス
        mask (SegMask): 共通のマスク
        backgrounds (Sequence[Image2D]): 背景条件画像 (2枚以上)
        seed (int): 共通のシード

    Returns:
        Dict[str, object]: 背景と生成画像の背景画素標準偏差、順序が一致したか
    """
    if len(backgrounds) < 2:
        raise ParameterError("背景は2枚以上必要です", str(len(backgrounds)))
    if net.background_encoder is None:
        raise ParameterError("背景条件を持たないモデルです", net.cfg.mode)

    source_std, generated_std = [], []
    for bg in backgrounds:
        cond = assemble_condition(mask, bg, net.f, net.background_encoder)
        image = sample(net, sched, cond, seed, ae)
        source_std.append(off_source_std(bg, mask) if bg.shape == mask.shape else float(np.std(bg.pixels)))
        generated_std.append(off_source_std(image, mask))

    ordered = list(np.argsort(source_std)) == list(np.argsort(generated_std))
    logger.info("背景入れ替え検査", extra={"source_std": source_std, "generated_std": generated_std, "ordered": ordered})
    return {"source_std": source_std, "generated_std": generated_std, "ordered": bool(ordered)}


def background_swap_consistency(
    net: RADiffModel,
    sched: NoiseSchedule,
    ae: Union[str, AutoencoderKL],
    masks: Sequence[SegMask],
    backgrounds: Sequence[Image2D],
    seeds: Sequence[int],
) -> Dict[str, object]:
    """
    seedとmaskの組ごとに background_swap_check を行い、順序が保たれた割合を返す

    Args:
        masks (Sequence[SegMask]): マスク (seedsと同数)
        backgrounds (Sequence[Image2D]): 全組で共通の背景条件画像
        seeds (Sequence[int]): 組ごとのシード

    Returns:
        Dict[str, object]: n_pairs, n_ordered, rate, checks
    """
    if len(masks) != len(seeds):
        raise ParameterError("マスク数とシード数が一致しません", f"{len(masks)} != {len(seeds)}")
    if not seeds:
        raise ParameterError("検査する組がありません")
    ae_model = ae if isinstance(ae, AutoencoderKL) else load_autoencoder(ae, str(next(net.parameters()).device))
    checks = [background_swap_check(net, sched, ae_model, m, backgrounds, int(s)) for m, s in zip(masks, seeds)]
    n_ordered = sum(1 for c in checks if c["ordered"])
    rate = n_ordered / len(checks)
    logger.info(f"背景入れ替え検査: {n_ordered}/{len(checks)}", extra={"rate": rate})
    return {"n_pairs": len(checks), "n_ordered": n_ordered, "rate": rate, "checks": checks}
