"""
構造的類似度 (SSIM)
一様窓の有効領域 (パディングなし) 上で局所SSIMを平均する
"""

from typing import Union

import numpy as np
from scipy import ndimage

from ..dataio.types import Image2D
from ..utils.errors import ParameterError, ShapeError

DEFAULT_WINDOW = 7
DEFAULT_K1 = 0.01
DEFAULT_K2 = 0.03

ImageLike = Union[Image2D, np.ndarray]


def _pixels(img: ImageLike) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, Image2D) else img, dtype=np.float64)


def ssim_map(
    x: ImageLike,
    y: ImageLike,
    window: int = DEFAULT_WINDOW,
    K1: float = DEFAULT_K1,
    K2: float = DEFAULT_K2,
    L: float = 1.0,
) -> np.ndarray:
    """窓ごとのSSIM ((H−w+1) × (W−w+1))"""
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ShapeError("画像の形状が一致しません", f"{a.shape} != {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ParameterError("窓サイズは正の奇数である必要があります", str(window))
    if min(a.shape) < window:
        raise ShapeError(f"画像が窓サイズ {window} より小さいです", str(a.shape))

    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2

    def local_mean(img: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(img, size=window, mode="reflect")

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    pad = window // 2
    return (numerator / denominator)[pad:a.shape[0] - pad, pad:a.shape[1] - pad]


def ssim(
    x: ImageLike,
    y: ImageLike,
    window: int = DEFAULT_WINDOW,
    K1: float = DEFAULT_K1,
    K2: float = DEFAULT_K2,
    L: float = 1.0,
) -> float:
    """
    平均SSIM

    Args:
        x, y: 同形状の画像
        window (int): 一様窓の一辺 (奇数)
        K1 (float): 輝度項の定数
        K2 (float): コントラスト項の定数
        L (float): ダイナミックレンジ (前処理済み画像なら1.0)

    Returns:
        float: [-1, 1] のSSIM
    """
    return float(np.mean(ssim_map(x, y, window, K1, K2, L)))
