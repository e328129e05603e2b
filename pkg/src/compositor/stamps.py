"""
生成画像からの天体切り出し
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from config.settings import Config
from ..dataio.types import EIGHT_CONNECTIVITY, Image2D, SegMask
from ..utils.errors import ShapeError

logger = logging.getLogger(__name__)

# 前処理 (tanh+1)/2 でフラックス0が写る値
PREPROCESSED_ZERO = 0.5


@dataclass
class ObjectStamp:
    """外接矩形で切り出した1天体 (フットプリント外は0)"""

    pixels: np.ndarray
    footprint: np.ndarray
    class_name: str
    crop_id: str = ""
    origin: Tuple[int, int] = (0, 0)
    k: Optional[float] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.footprint = np.asarray(self.footprint, dtype=bool)
        if self.pixels.shape != self.footprint.shape:
            raise ShapeError("スタンプとフットプリントの形状が一致しません", f"{self.pixels.shape} != {self.footprint.shape}")
        if not self.footprint.any():
            raise ShapeError("フットプリントが空です", self.crop_id)
        self.pixels = np.where(self.footprint, self.pixels, 0.0)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.pixels.shape)

    @property
    def area(self) -> int:
        return int(self.footprint.sum())


def extract_objects(
    crop: Image2D,
    mask: SegMask,
    structure: np.ndarray = EIGHT_CONNECTIVITY,
    crop_id: str = "",
    zero_level: Optional[float] = None,
) -> List[ObjectStamp]:
    """
    非背景ラベルの連結成分ごとにスタンプを作る

    成分のクラスは成分内の多数決ラベル。前処理済みの画像はフラックス0の値 (0.5) を引いてから切り出す。

    Args:
        crop (Image2D): 生成画像
        mask (SegMask): 生成に使ったマスク
        structure (np.ndarray): 連結性 (デフォルトは8近傍)
        crop_id (str): 元画像の識別子
        zero_level (Optional[float]): 画素から引く値 (Noneなら前処理済みで0.5、それ以外で0)

    Returns:
        List[ObjectStamp]: スタンプ (マスクが空なら空リスト)
    """
    if crop.shape != mask.shape:
        raise ShapeError("画像とマスクの形状が一致しません", f"{crop.shape} != {mask.shape}")
    if zero_level is None:
        zero_level = PREPROCESSED_ZERO if crop.preprocessed else 0.0
    components, n = ndimage.label(mask.labels > 0, structure=structure)
    stamps = []
    for index, box in enumerate(ndimage.find_objects(components), start=1):
        if box is None:
            continue
        footprint = components[box] == index
        codes = mask.labels[box][footprint]
        majority = int(np.bincount(codes, minlength=mask.num_classes + 1)[1:].argmax()) + 1
        stamps.append(ObjectStamp(
            pixels=crop.pixels[box].astype(np.float64) - zero_level,
            footprint=footprint,
            class_name=Config.class_name(majority),
            crop_id=crop_id or crop.provenance,
            origin=(box[0].start, box[1].start),
        ))
    logger.debug(f"天体切り出し: {len(stamps)}個", extra={"crop_id": crop_id})
    return stamps
