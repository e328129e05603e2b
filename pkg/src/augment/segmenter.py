"""
セグメンターの学習と評価
"""

import logging
import os
from typing import Dict, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..dataio.types import Dataset
from ..metrics.segmentation import mean_iou
from ..models.segmenter import SEGMENTER_KIND, SegmenterConfig, SegmenterNet, load_segmenter, predict_labels
from ..utils.checkpoint import LossLog, prefixed, save_checkpoint
from ..utils.errors import DataError, DivergenceError, ParameterError, ShapeError
from ..utils.seeding import seeded_build, torch_generator

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "loss", "val_iou"]


def evaluate_segmenter(
    segmenter: Union[str, SegmenterNet],
    ds: Dataset,
    include_background: bool = True,
) -> Tuple[Dict[int, float], float]:
    """
    データセット上のIoU

    実験表のIoU_allは背景クラス0も含めた平均。物体クラスだけの値はクラスごとの表から読む。

    Returns:
        Tuple[Dict[int, float], float]: (クラスごとの平均IoU, 平均IoU)
    """
    net = load_segmenter(segmenter) if isinstance(segmenter, str) else segmenter
    images, _ = ds.to_tensors()
    preds = predict_labels(net, images)
    table, value, _ = mean_iou([p.numpy() for p in preds], ds.masks, net.cfg.num_classes, include_background)
    return table, value


def train_segmenter(
    ds: Dataset,
    cfg: SegmenterConfig,
    out_dir: str,
    seed: int = 0,
    val_ds: Optional[Dataset] = None,
    device: str = "cpu",
    progress: bool = False,
    name: str = "segmenter",
) -> str:
    """
    クロスエントロピーで画素ごとの(N_c+1)クラス分類器を学習

    Args:
        ds (Dataset): 画像とマスクの組
        cfg (SegmenterConfig): 設定
        out_dir (str): 出力先
        seed (int): シード
        val_ds (Optional[Dataset]): 検証データ (エポックごとにIoUを記録)
        name (str): チェックポイントと損失ログのファイル名

    Returns:
        str: チェックポイントのパス
    """
    if len(ds) == 0:
        raise DataError("学習データが空です")
    images, masks = ds.to_tensors()
    n, _, height, width = images.shape
    factor = 2 ** cfg.depth
    if height % factor or width % factor:
        raise ShapeError(f"画像サイズが{factor}で割り切れません", f"{height}x{width}")
    if int(masks.max()) > cfg.num_classes:
        raise DataError("マスクのラベルがクラス数を超えています", str(int(masks.max())))

    weight = None
    if cfg.class_weights is not None:
        if len(cfg.class_weights) != cfg.num_classes + 1:
            raise ParameterError("class_weightsは背景を含むN_c+1個が必要です", str(cfg.class_weights))
        weight = torch.tensor(cfg.class_weights, dtype=torch.float32, device=device)

    model = seeded_build(lambda: SegmenterNet(cfg), seed).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch_generator(seed + 1)
    log = LossLog(os.path.join(out_dir, f"{name}_loss.csv"), LOSS_COLUMNS)

    loss_value, val_iou = float("nan"), float("nan")
    for epoch in tqdm(range(cfg.epochs), disable=not progress, desc=name):
        model.train()
        perm = torch.randperm(n, generator=generator)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits = model(images[idx].to(device))
            loss = F.cross_entropy(logits, masks[idx].to(device), weight=weight)
            if not torch.isfinite(loss):
                raise DivergenceError("損失が発散しました", f"epoch={epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        loss_value = total / batches
        if val_ds is not None and len(val_ds):
            _, val_iou = evaluate_segmenter(model, val_ds)
        log.append(epoch=epoch + 1, loss=loss_value, val_iou=val_iou)
        logger.debug(f"{name} エポック {epoch + 1}/{cfg.epochs}: loss={loss_value:.4f}")

    log.flush()
    logger.info(f"{name} 学習完了: loss={loss_value:.4f}, val_iou={val_iou:.4f}")
    return save_checkpoint(
        os.path.join(out_dir, f"{name}.pt"),
        SEGMENTER_KIND,
        cfg.model_dump(mode="json"),
        prefixed("model", model.state_dict()),
        epoch=cfg.epochs,
        losses={"loss": loss_value, "val_iou": val_iou},
    )
