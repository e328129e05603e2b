"""
テスト共通のフィクスチャ
"""

import numpy as np
import pytest

from src.dataio.preprocessing import preprocess_dataset
from src.dataio.toy_generator import generate_toy_dataset
from src.dataio.types import Cutout, Dataset, Image2D, SegMask


@pytest.fixture
def toy_raw():
    """32x32のトイデータ (前処理前)"""
    return generate_toy_dataset(8, 32, (0.5, 0.3, 0.2), seed=3)


@pytest.fixture
def toy_ds(toy_raw):
    """32x32のトイデータ (前処理済み)"""
    return preprocess_dataset(toy_raw)


def make_cutout(item_id: str, labels: np.ndarray, value: float = 0.5) -> Cutout:
    """指定ラベルの矩形画像を持つカットアウト"""
    pixels = np.where(labels > 0, 0.9, value).astype(np.float32)
    return Cutout(Image2D(pixels, provenance=item_id, preprocessed=True), SegMask(labels), {"item_id": item_id})


@pytest.fixture
def block_ds():
    """コンパクト/拡がった天体を交互に含む小さなデータセット"""
    items = []
    for i in range(10):
        labels = np.zeros((16, 16), dtype=np.int64)
        code = 2 if i % 2 else 1
        labels[4:9, 4 + (i % 3):9 + (i % 3)] = code
        items.append(make_cutout(f"block_{i:02d}", labels))
    return Dataset(items)
