"""
データセットの分割と統計
"""

import math
from typing import Tuple

import numpy as np
import pandas as pd

from ..utils.errors import ParameterError
from .types import CLASS_NAMES, Dataset, count_components


def split_indices(n: int, ratio: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    シード付きシャッフルで学習/テストのインデックスに分割

    学習側は ⌊ratio·N⌋ 件 (13,602件・0.8で10,881件)。

    Returns:
        Tuple[np.ndarray, np.ndarray]: (学習インデックス, テストインデックス)
    """
    if n <= 0:
        raise ParameterError("空のデータセットは分割できません")
    if not (0.0 < ratio < 1.0):
        raise ParameterError("ratioは(0,1)の範囲である必要があります", str(ratio))
    order = np.random.default_rng(seed).permutation(n)
    # 0.7*10 = 7.000000000000001 のような誤差を吸収
    n_train = int(math.floor(ratio * n + 1e-9))
    return order[:n_train], order[n_train:]


def split_dataset(ds: Dataset, ratio: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    データセットを学習用とテスト用に分割

    Args:
        ds (Dataset): 元データセット
        ratio (float): 学習側の比率 (0,1)
        seed (int): シャッフルのシード

    Returns:
        Tuple[Dataset, Dataset]: (学習, テスト)
    """
    train_idx, test_idx = split_indices(len(ds), ratio, seed)
    train = ds.subset(train_idx)
    test = ds.subset(test_idx)
    train.split_seed = seed
    test.split_seed = seed
    return train, test


def dataset_statistics(ds: Dataset) -> pd.DataFrame:
    """
    クラスごとのインスタンス統計

    Returns:
        pd.DataFrame: class, instances, cutouts, avg_per_cutout
    """
    rows = []
    per_item = [count_components(item.mask) for item in ds.items]
    for name in CLASS_NAMES:
        instances = sum(counts.get(name, 0) for counts in per_item)
        cutouts = sum(1 for counts in per_item if counts.get(name, 0) > 0)
        rows.append({
            "class": name,
            "instances": instances,
            "cutouts": cutouts,
            "avg_per_cutout": instances / cutouts if cutouts else 0.0,
        })
    return pd.DataFrame(rows, columns=["class", "instances", "cutouts", "avg_per_cutout"])


def image_rms(ds: Dataset) -> np.ndarray:
    """画像ごとのRMS (有限ピクセルのみ)"""
    values = []
    for item in ds.items:
        pixels = item.image.pixels[np.isfinite(item.image.pixels)].astype(np.float64)
        values.append(float(np.sqrt(np.mean(pixels ** 2))) if pixels.size else 0.0)
    return np.asarray(values, dtype=np.float64)
