"""
条件の構築
マスクは潜在解像度のone-hotチャネルとして連結し、背景は埋め込みとして交差注意に渡す
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..dataio.types import Image2D, SegMask
from ..utils.errors import SchemaError, ShapeError
from .encoder import BackgroundEncoder

logger = logging.getLogger(__name__)


@dataclass
class MaskChannels:
    """(N_c+1, h, w) のクラス別占有率"""

    values: torch.Tensor
    f: int

    @property
    def num_planes(self) -> int:
        return int(self.values.shape[0])


@dataclass
class BackgroundEmbedding:
    vector: torch.Tensor
    source_id: str = ""


@dataclass
class ConditionBundle:
    """空のバンドルは無条件生成を意味する"""

    mask: Optional[MaskChannels] = None
    background: Optional[BackgroundEmbedding] = None
    latent_shape: Optional[tuple] = None

    @property
    def is_empty(self) -> bool:
        return self.mask is None and self.background is None


@dataclass
class ConditionSpec:
    """バッチサンプリング用の条件指定"""

    mask_path: str
    background_path: Optional[str]
    seed: int


def one_hot_planes(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(..., H, W) の整数ラベル -> (..., N_c+1, H, W) のone-hot"""
    planes = F.one_hot(labels.long(), num_classes + 1).to(torch.float32)
    return planes.movedim(-1, -3)


def encode_mask(m: SegMask, f: int) -> MaskChannels:
    """
    マスクをone-hotに展開し、f×f平均プーリングで潜在解像度に落とす

    Args:
        m (SegMask): 整数マスク
        f (int): 圧縮率

    Returns:
        MaskChannels: (N_c+1, H/f, W/f)
    """
    height, width = m.shape
    if height % f or width % f:
        raise ShapeError(f"マスクサイズが圧縮率f={f}で割り切れません", str(m.shape))
    planes = one_hot_planes(torch.from_numpy(m.labels), m.num_classes)
    pooled = F.avg_pool2d(planes[None], kernel_size=f)[0]
    return MaskChannels(pooled, f)


def decode_mask_channels(channels: MaskChannels, num_classes: Optional[int] = None) -> SegMask:
    """argmaxで整数マスクに戻す"""
    labels = torch.argmax(channels.values, dim=0).cpu().numpy()
    return SegMask(labels, num_classes or channels.num_planes - 1)


def encode_background(encoder: BackgroundEncoder, img: Image2D) -> BackgroundEmbedding:
    """
    背景画像を埋め込みベクトルに射影

    Args:
        encoder (BackgroundEncoder): 学習済み (または学習中) の E_c
        img (Image2D): 前処理済み画像

    Returns:
        BackgroundEmbedding: 幅 encoder.embedding_dim のベクトル
    """
    device = next(encoder.parameters()).device
    x = torch.from_numpy(img.pixels.astype(np.float32))[None, None].to(device)
    with torch.no_grad():
        vector = encoder(x)[0].cpu()
    return BackgroundEmbedding(vector, img.provenance)


def assemble_condition(
    mask: Optional[SegMask],
    bg: Optional[Image2D],
    f: int,
    background_encoder: Optional[BackgroundEncoder] = None,
) -> ConditionBundle:
    """
    マスクは連結用、背景は交差注意のK/V用に振り分ける

    (None, None) は無条件、(mask, None) は背景なしの構成、(mask, bg) は完全な構成になる。
    """
    channels = encode_mask(mask, f) if mask is not None else None
    embedding = None
    if bg is not None:
        if background_encoder is None:
            logger.warning("背景エンコーダーがないため背景条件を無視します")
        else:
            embedding = encode_background(background_encoder, bg)
    shape = None
    if mask is not None:
        shape = (mask.shape[0] // f, mask.shape[1] // f)
    elif bg is not None:
        shape = (bg.height // f, bg.width // f)
    return ConditionBundle(channels, embedding, shape)


def load_condition_specs(path: str) -> List[ConditionSpec]:
    """
    条件指定ファイル [{mask_path, background_path|null, seed}] を読み込む
    (相対パスはファイルの場所を基準に解決)
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            entries = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError("条件指定ファイルが不正です", f"{path}: {e}") from e
    if not isinstance(entries, list):
        raise SchemaError("条件指定ファイルはリストである必要があります", path)

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: Optional[str]) -> Optional[str]:
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(base, p)

    specs = []
    for entry in entries:
        if "mask_path" not in entry or "seed" not in entry:
            raise SchemaError("各エントリには mask_path と seed が必要です", str(entry))
        specs.append(ConditionSpec(resolve(entry["mask_path"]), resolve(entry.get("background_path")), int(entry["seed"])))
    return specs
