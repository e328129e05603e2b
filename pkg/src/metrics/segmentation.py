"""
IoUとセグメンテーションスコア
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config.settings import Config
from ..dataio.types import Image2D, SegMask
from ..models.segmenter import SegmenterNet, load_segmenter, predict_labels
from ..utils.errors import DataError, DependencyError, ShapeError

logger = logging.getLogger(__name__)

MaskLike = Union[SegMask, np.ndarray]


def _labels(m: MaskLike, K: int) -> np.ndarray:
    labels = np.asarray(m.labels if isinstance(m, SegMask) else m)
    if labels.size and (labels.min() < 0 or labels.max() > K):
        raise DataError("ラベルが範囲外です", f"[{labels.min()}, {labels.max()}] not in [0, {K}]")
    return labels


def iou(
    pred: MaskLike,
    gt: MaskLike,
    K: Optional[int] = None,
    include_background: bool = True,
) -> Tuple[Dict[int, float], float]:
    """
    クラスごとのIoUとその平均

    予測と正解のどちらにも現れないクラス (和集合が空) は平均から除外し、値はNaNにする。

    Args:
        pred: 予測マスク
        gt: 正解マスク
        K (Optional[int]): 物体クラス数 (ラベルは[0, K])
        include_background (bool): 背景クラス0も平均に含めるか

    Returns:
        Tuple[Dict[int, float], float]: (クラス -> IoU, 平均IoU)
    """
    K = K if K is not None else Config.get_setting("num_classes")
    p, g = _labels(pred, K), _labels(gt, K)
    if p.shape != g.shape:
        raise ShapeError("マスクの形状が一致しません", f"{p.shape} != {g.shape}")

    per_class: Dict[int, float] = {}
    for k in range(0 if include_background else 1, K + 1):
        pk, gk = p == k, g == k
        union = np.logical_or(pk, gk).sum()
        per_class[k] = float(np.logical_and(pk, gk).sum() / union) if union else float("nan")
    included = [v for v in per_class.values() if not np.isnan(v)]
    return per_class, float(np.mean(included)) if included else float("nan")


def mean_iou(
    preds: Sequence[MaskLike],
    gts: Sequence[MaskLike],
    K: Optional[int] = None,
    include_background: bool = True,
) -> Tuple[Dict[int, float], float, List[float]]:
    """
    データセット全体のIoU (画像ごとの平均IoUを画像間で平均)

    Returns:
        Tuple[Dict[int, float], float, List[float]]: (クラスごとの平均IoU, 平均IoU, 画像ごとの平均IoU)
    """
    if len(preds) != len(gts):
        raise ShapeError("予測と正解の枚数が一致しません", f"{len(preds)} != {len(gts)}")
    per_image: List[float] = []
    class_values: Dict[int, List[float]] = {}
    for pred, gt in zip(preds, gts):
        per_class, value = iou(pred, gt, K, include_background)
        per_image.append(value)
        for k, v in per_class.items():
            if not np.isnan(v):
                class_values.setdefault(k, []).append(v)
    defined = [v for v in per_image if not np.isnan(v)]
    table = {k: float(np.mean(vs)) for k, vs in sorted(class_values.items())}
    return table, float(np.mean(defined)) if defined else float("nan"), per_image


def _images_tensor(images: Sequence[Image2D]) -> torch.Tensor:
    return torch.from_numpy(np.stack([img.pixels for img in images]).astype(np.float32))[:, None]


def segment_images(
    segmenter: Union[str, SegmenterNet],
    images: Sequence[Image2D],
    device: str = "cpu",
) -> List[SegMask]:
    """セグメンターで各画像のマスクを予測"""
    if segmenter is None:
        raise DependencyError("セグメンターが指定されていません")
    net = load_segmenter(segmenter, device) if isinstance(segmenter, str) else segmenter
    if not images:
        return []
    labels = predict_labels(net, _images_tensor(images))
    return [SegMask(lab.numpy(), net.cfg.num_classes) for lab in labels]


def segmentation_score(
    generated: Sequence[Image2D],
    gt_masks: Sequence[SegMask],
    segmenter: Union[str, SegmenterNet],
    include_background: bool = False,
) -> float:
    """
    生成画像に対する予測マスクと条件マスクのIoU平均

    既定では物体クラス (1..K) だけを平均する。背景クラスを含めると、何も写っていない画像でも
    IoU_bg / (現れたクラス数) だけ点が入るため。物体を含まない条件マスクの画像は平均から外れる。

    Args:
        generated (Sequence[Image2D]): 生成画像
        gt_masks (Sequence[SegMask]): 生成に使った条件マスク
        segmenter: 学習済みセグメンターまたはそのチェックポイントパス
        include_background (bool): 背景クラス0も平均に含めるか

    Returns:
        float: [0, 1] のスコア (どの画像にも物体がなければNaN)
    """
    if len(generated) != len(gt_masks):
        raise ShapeError("画像とマスクの枚数が一致しません", f"{len(generated)} != {len(gt_masks)}")
    preds = segment_images(segmenter, generated)
    K = gt_masks[0].num_classes if gt_masks else None
    _, score, _ = mean_iou(preds, gt_masks, K, include_background)
    logger.info(f"セグメンテーションスコア: {score:.4f}", extra={"n": len(generated)})
    return score
