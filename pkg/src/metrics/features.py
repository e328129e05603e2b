"""
自己教師あり特徴抽出器の学習と特徴抽出
同じ画像の2つの拡張ビューを近づけ、異なる画像を遠ざける (NT-Xent)
"""

import logging
import os
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..dataio.types import Dataset, Image2D
from ..models.extractor import EXTRACTOR_KIND, ExtractorConfig, FeatureExtractor, load_extractor
from ..utils.checkpoint import LossLog, prefixed, save_checkpoint
from ..utils.errors import DataError, DivergenceError
from ..utils.seeding import seeded_build, torch_generator
from .fid import FeatureSet

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "loss"]


def augment_view(x: torch.Tensor, crop_fraction: float, generator: torch.Generator) -> torch.Tensor:
    """ランダムクロップ (元サイズにリサイズ) + ランダム反転"""
    n, _, height, width = x.shape
    ch, cw = max(1, int(round(height * crop_fraction))), max(1, int(round(width * crop_fraction)))
    views = []
    for i in range(n):
        top = int(torch.randint(0, height - ch + 1, (1,), generator=generator))
        left = int(torch.randint(0, width - cw + 1, (1,), generator=generator))
        view = x[i:i + 1, :, top:top + ch, left:left + cw]
        view = F.interpolate(view, size=(height, width), mode="bilinear", align_corners=False)
        if torch.rand(1, generator=generator) < 0.5:
            view = torch.flip(view, dims=[3])
        if torch.rand(1, generator=generator) < 0.5:
            view = torch.flip(view, dims=[2])
        views.append(view)
    return torch.cat(views)


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """正規化温度付きクロスエントロピー (各ビューの正例はもう一方のビュー)"""
    n = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    logits = z @ z.T / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool, device=z.device), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(logits, targets)


def train_feature_extractor(
    ds: Dataset,
    cfg: ExtractorConfig,
    out_dir: str,
    seed: int = 0,
    device: str = "cpu",
    progress: bool = False,
) -> str:
    """
    ラベルなし画像で特徴抽出器を学習

    Args:
        ds (Dataset): 前処理済み画像 (マスクは使わない)
        cfg (ExtractorConfig): 設定
        out_dir (str): 出力先
        seed (int): シード

    Returns:
        str: チェックポイントのパス
    """
    if len(ds) < 2:
        raise DataError("対照学習には2枚以上の画像が必要です", str(len(ds)))
    images, _ = ds.to_tensors()
    n = images.shape[0]

    model = seeded_build(lambda: FeatureExtractor(cfg), seed).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch_generator(seed + 1)
    log = LossLog(os.path.join(out_dir, "extractor_loss.csv"), LOSS_COLUMNS)

    loss_value = float("nan")
    for epoch in tqdm(range(cfg.epochs), disable=not progress, desc="extractor"):
        model.train()
        perm = torch.randperm(n, generator=generator)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = images[perm[start:start + cfg.batch_size]]
            if batch.shape[0] < 2:
                continue
            v1 = augment_view(batch, cfg.crop_fraction, generator).to(device)
            v2 = augment_view(batch, cfg.crop_fraction, generator).to(device)
            loss = nt_xent(model.project(v1), model.project(v2), cfg.temperature)
            if not torch.isfinite(loss):
                raise DivergenceError("損失が発散しました", f"epoch={epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        if batches:
            loss_value = total / batches
            log.append(epoch=epoch + 1, loss=loss_value)
            logger.info(f"特徴抽出器エポック {epoch + 1}/{cfg.epochs}: loss={loss_value:.4f}")

    log.flush()
    return save_checkpoint(
        os.path.join(out_dir, "extractor.pt"),
        EXTRACTOR_KIND,
        cfg.model_dump(mode="json"),
        prefixed("model", model.state_dict()),
        epoch=cfg.epochs,
        losses={"loss": loss_value},
    )


def extract_features(
    extractor: Union[str, FeatureExtractor],
    images: Sequence[Image2D],
    batch_size: int = 32,
    device: str = "cpu",
    extractor_id: Optional[str] = None,
) -> FeatureSet:
    """
    画像群から特徴ベクトルを抽出

    Args:
        extractor: 特徴抽出器またはそのチェックポイントパス
        images (Sequence[Image2D]): 画像
        batch_size (int): バッチサイズ

    Returns:
        FeatureSet: N × feature_dim
    """
    if isinstance(extractor, str):
        extractor_id = extractor_id or extractor
        extractor = load_extractor(extractor, device)
    extractor.eval()
    model_device = next(extractor.parameters()).device
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack([img.pixels for img in images[start:start + batch_size]]).astype(np.float32)
            outputs.append(extractor(torch.from_numpy(batch)[:, None].to(model_device)).cpu().numpy())
    vectors = np.concatenate(outputs) if outputs else np.zeros((0, extractor.cfg.feature_dim))
    return FeatureSet(vectors, extractor_id or "in-memory")
