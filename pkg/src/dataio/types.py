"""
データ型定義
画像・セグメンテーションマスク・カットアウト・データセット
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from config.settings import Config
from ..utils.errors import DataError, ShapeError

CLASS_NAMES = ("compact", "extended", "spurious")

# 8近傍の連結性
EIGHT_CONNECTIVITY = np.ones((3, 3), dtype=bool)
FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


@dataclass
class Image2D:
    """2次元画像 (前処理前はJy/beam、前処理後は[0,1])"""

    pixels: np.ndarray
    provenance: str = ""
    preprocessed: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ShapeError("画像は2次元である必要があります", f"ndim={self.pixels.ndim}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ShapeError("画像サイズが不正です", str(self.pixels.shape))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)


@dataclass
class SegMask:
    """ピクセルごとのクラスラベル (0 = 背景)"""

    labels: np.ndarray
    num_classes: int = Config.get_setting("num_classes")

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError("マスクは2次元である必要があります", f"ndim={labels.ndim}")
        if self.num_classes < 1:
            raise DataError("クラス数は正の整数である必要があります", str(self.num_classes))
        if labels.size and (labels.min() < 0 or labels.max() > self.num_classes):
            raise DataError(
                "ラベルが範囲外です",
                f"[{labels.min()}, {labels.max()}] not in [0, {self.num_classes}]",
            )
        self.labels = labels.astype(np.int64)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.labels.shape)

    @classmethod
    def empty(cls, shape: Tuple[int, int], num_classes: int = 3) -> "SegMask":
        return cls(np.zeros(shape, dtype=np.int64), num_classes)


@dataclass
class ObjectRecord:
    """注入された1天体 (クラス名とフットプリント)"""

    class_name: str
    footprint: np.ndarray


@dataclass
class Cutout:
    """画像とマスクの組"""

    image: Image2D
    mask: SegMask
    meta: Dict[str, Any] = field(default_factory=dict)
    objects: List[ObjectRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ShapeError("画像とマスクの形状が一致しません", f"{self.image.shape} != {self.mask.shape}")

    @property
    def item_id(self) -> str:
        return str(self.meta.get("item_id", self.image.provenance))


def count_components(mask: SegMask, structure: np.ndarray = EIGHT_CONNECTIVITY) -> Dict[str, int]:
    """
    クラスごとの連結成分 (天体インスタンス) 数を数える

    Args:
        mask (SegMask): マスク
        structure (np.ndarray): 連結性 (デフォルトは8近傍)

    Returns:
        Dict[str, int]: クラス名 -> インスタンス数
    """
    counts = {}
    for code in range(1, mask.num_classes + 1):
        _, n = ndimage.label(mask.labels == code, structure=structure)
        counts[Config.class_name(code)] = int(n)
    return counts


@dataclass
class Dataset:
    """カットアウトの順序付きリスト"""

    items: List[Cutout] = field(default_factory=list)
    split_seed: Optional[int] = None
    class_counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = self.compute_class_counts()

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, index: int) -> Cutout:
        return self.items[index]

    def compute_class_counts(self) -> Dict[str, int]:
        totals = {name: 0 for name in CLASS_NAMES}
        for item in self.items:
            if item.objects:
                for obj in item.objects:
                    totals[obj.class_name] = totals.get(obj.class_name, 0) + 1
            else:
                for name, n in count_components(item.mask).items():
                    totals[name] = totals.get(name, 0) + n
        return totals

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[i] for i in indices], split_seed=self.split_seed)

    @property
    def images(self) -> List[Image2D]:
        return [item.image for item in self.items]

    @property
    def masks(self) -> List[SegMask]:
        return [item.mask for item in self.items]

    def to_tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        学習用テンソルに変換

        Returns:
            Tuple[torch.Tensor, torch.Tensor]: 画像 (N,1,H,W) float32 と マスク (N,H,W) int64
        """
        if not self.items:
            raise DataError("空のデータセットはテンソル化できません")
        images = np.stack([item.image.pixels for item in self.items])[:, None]
        masks = np.stack([item.mask.labels for item in self.items])
        return torch.from_numpy(images.astype(np.float32)), torch.from_numpy(masks.astype(np.int64))
