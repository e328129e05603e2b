"""
前処理
NaNを0に置き換え、tanhで[0,1]に写像する
"""

import math

import numpy as np
from astropy.stats import median_absolute_deviation

from config.settings import Config
from ..utils.errors import ParameterError, ShapeError
from .types import Dataset, Cutout, Image2D

MAD_MULTIPLIER = 5.0


def default_scale(raw: Image2D) -> float:
    """tanhのスケール: 有限ピクセルの中央絶対偏差の5倍 (0なら1.0)"""
    finite = raw.pixels[np.isfinite(raw.pixels)]
    if finite.size == 0:
        return 1.0
    mad = float(median_absolute_deviation(finite.astype(np.float64)))
    scale = MAD_MULTIPLIER * mad
    return scale if scale > 0 and math.isfinite(scale) else 1.0


def preprocess(raw: Image2D, scale: float, normalize: bool = False) -> Image2D:
    """
    画像を前処理

    y = (tanh(x / scale) + 1) / 2

    Args:
        raw (Image2D): 生画像 (Jy/beam)
        scale (float): tanhのスケール (正の値)
        normalize (bool): tanh後に画像ごとのmin-max正規化を行うか

    Returns:
        Image2D: [0,1]に収まった画像
    """
    if not (scale > 0) or not math.isfinite(scale):
        raise ParameterError("scaleは正の有限値である必要があります", str(scale))
    min_size = Config.get_setting("min_cutout_size")
    if raw.width < min_size or raw.height < min_size:
        raise ShapeError(f"画像は{min_size}x{min_size}以上である必要があります", str(raw.shape))

    x = raw.pixels.astype(np.float64)
    x = np.where(np.isnan(x), 0.0, x)
    y = (np.tanh(x / scale) + 1.0) / 2.0

    if normalize:
        lo, hi = float(y.min()), float(y.max())
        if hi > lo:
            y = (y - lo) / (hi - lo)

    y = np.clip(y, 0.0, 1.0)
    return Image2D(y.astype(np.float32), provenance=raw.provenance, preprocessed=True)


def preprocess_dataset(ds: Dataset, scale: float = None, normalize: bool = False) -> Dataset:
    """
    データセット全体を前処理 (scale未指定なら画像ごとにdefault_scale)
    """
    items = []
    for item in ds.items:
        if item.image.preprocessed:
            items.append(item)
            continue
        s = scale if scale is not None else default_scale(item.image)
        image = preprocess(item.image, s, normalize=normalize)
        meta = dict(item.meta, tanh_scale=s)
        items.append(Cutout(image, item.mask, meta, item.objects))
    return Dataset(items, split_seed=ds.split_seed, class_counts=dict(ds.class_counts))
