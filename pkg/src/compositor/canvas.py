"""
大規模マップへの天体配置
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Union

import numpy as np

from config.settings import Config
from ..dataio.types import Image2D
from ..utils.errors import ParameterError, PlacementError, ShapeError
from .stamps import ObjectStamp

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator]


@dataclass
class SkyCanvas:
    """
    合成中のマップ

    catalogの各要素は {x, y, class, k, bbox, crop_id}。
    x, y はフットプリント重心 (列, 行)、bbox は [x0, y0, x1, y1] (x1, y1 は含まない)。
    """

    pixels: np.ndarray
    occupancy: np.ndarray = None
    catalog: List[Dict[str, Any]] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.occupancy is None:
            self.occupancy = np.zeros(self.pixels.shape, dtype=bool)
        if self.occupancy.shape != self.pixels.shape:
            raise ShapeError("占有グリッドとマップの形状が一致しません")

    @classmethod
    def from_image(cls, image: Image2D) -> "SkyCanvas":
        return cls(image.pixels.astype(np.float64), provenance=image.provenance)

    @property
    def shape(self):
        return self.pixels.shape

    def copy(self) -> "SkyCanvas":
        return SkyCanvas(
            self.pixels.copy(),
            self.occupancy.copy(),
            [dict(entry) for entry in self.catalog],
            self.provenance,
        )

    def to_image(self) -> Image2D:
        return Image2D(self.pixels, provenance=self.provenance)


def place_objects(
    canvas: SkyCanvas,
    stamps: Sequence[ObjectStamp],
    overlap_fraction: float = 0.0,
    seed: SeedLike = 0,
    max_attempts: int = Config.FLUX_MODEL["max_attempts"],
) -> SkyCanvas:
    """
    スタンプを一様乱数の位置に加算で配置する

    既存の占有画素との重なりが overlap_fraction × フットプリント面積 以下なら採用。
    max_attempts 回で置けなければそのスタンプは飛ばす。入力のcanvasは変更しない。

    Args:
        canvas (SkyCanvas): 背景マップ
        stamps (Sequence[ObjectStamp]): フラックス調整済みスタンプ
        overlap_fraction (float): 許容する重なりの割合 [0, 1)
        seed: シードまたはGenerator
        max_attempts (int): スタンプごとの試行回数

    Returns:
        SkyCanvas: 配置後のマップ
    """
    if not (0.0 <= overlap_fraction < 1.0):
        raise ParameterError("overlap_fractionは[0,1)の範囲である必要があります", str(overlap_fraction))
    result = canvas.copy()
    if not stamps:
        return result
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    height, width = result.shape

    placed = 0
    for index, stamp in enumerate(stamps):
        sh, sw = stamp.shape
        if sh > height or sw > width:
            logger.warning(f"スタンプ {index} がマップより大きいため飛ばします", extra={"stamp_shape": [sh, sw]})
            continue
        allowed = overlap_fraction * stamp.area
        for _ in range(max_attempts):
            y0 = int(rng.integers(0, height - sh + 1))
            x0 = int(rng.integers(0, width - sw + 1))
            region = (slice(y0, y0 + sh), slice(x0, x0 + sw))
            overlap = int(np.logical_and(result.occupancy[region], stamp.footprint).sum())
            if overlap <= allowed:
                break
        else:
            logger.info(
                f"スタンプ {index} を{max_attempts}回の試行で配置できなかったため飛ばします",
                extra={"crop_id": stamp.crop_id, "class": stamp.class_name},
            )
            continue

        result.pixels[region] += stamp.pixels
        result.occupancy[region] |= stamp.footprint
        rows, cols = np.nonzero(stamp.footprint)
        result.catalog.append({
            "x": float(x0 + cols.mean()),
            "y": float(y0 + rows.mean()),
            "class": stamp.class_name,
            "k": stamp.k,
            "bbox": [x0, y0, x0 + sw, y0 + sh],
            "crop_id": stamp.crop_id,
        })
        placed += 1

    if placed == 0:
        raise PlacementError("スタンプを1つも配置できませんでした", f"stamps={len(stamps)}")
    logger.info(f"天体配置: {placed}/{len(stamps)}", extra={"placed": placed, "total": len(stamps)})
    return result


def write_catalog(canvas: SkyCanvas, path: str) -> str:
    """真値カタログをJSONで保存"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(canvas.catalog, f, indent=2, ensure_ascii=False)
    logger.info(f"カタログ保存: {path} ({len(canvas.catalog)}件)")
    return path


def cut_background_patch(bg: Image2D, size: int, rng: SeedLike = 0) -> Image2D:
    """
    背景マップから size × size の領域をランダムに切り出す

    Args:
        bg (Image2D): 背景マップ
        size (int): 一辺
        rng: シードまたはGenerator

    Returns:
        Image2D: 切り出した背景
    """
    if size < 1 or bg.height < size or bg.width < size:
        raise ShapeError(f"背景マップが切り出しサイズ {size} より小さいです", str(bg.shape))
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    y0 = int(rng.integers(0, bg.height - size + 1))
    x0 = int(rng.integers(0, bg.width - size + 1))
    return Image2D(
        bg.pixels[y0:y0 + size, x0:x0 + size].copy(),
        provenance=f"{bg.provenance}[{y0}:{y0 + size},{x0}:{x0 + size}]",
    )
