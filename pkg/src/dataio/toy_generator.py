"""
トイデータセット生成
相関ノイズ背景の上にコンパクト・拡がった・スプリアス天体を注入し、
一定のフラックス閾値の等高線から正確なマスクを作る
"""

import logging
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from config.settings import Config
from ..utils.errors import ParameterError
from .types import CLASS_NAMES, Cutout, Dataset, Image2D, ObjectRecord, SegMask

logger = logging.getLogger(__name__)

ALLOWED_SIZES = (32, 64, 128)

# 背景ノイズ (Jy/beam) と閾値 (ノイズσの倍数)
NOISE_SIGMA = 1e-4
NOISE_CORRELATION = 1.5
THRESHOLD_SIGMA = 3.0
PEAK_SNR_RANGE = (10.0, 60.0)
MEAN_OBJECTS = 2.0
MAX_OBJECTS = 6


def _grid(shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return yy.astype(np.float64), xx.astype(np.float64)


def render_compact(
    shape: Tuple[int, int],
    center: Tuple[float, float],
    sigmas: Tuple[float, float],
    angle: float,
    amplitude: float,
) -> np.ndarray:
    """楕円ガウシアン"""
    yy, xx = _grid(shape)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return amplitude * np.exp(-0.5 * ((u / sigmas[0]) ** 2 + (v / sigmas[1]) ** 2))


def render_extended(
    shape: Tuple[int, int],
    center: Tuple[float, float],
    separation: float,
    angle: float,
    lobe_sigma: float,
    amplitude: float,
    n_lobes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """多ローブ天体 (ローブ + 淡いブリッジ)"""
    flux = np.zeros(shape, dtype=np.float64)
    offsets = np.linspace(-separation, separation, n_lobes)
    for offset in offsets:
        cy = center[0] + offset * np.sin(angle)
        cx = center[1] + offset * np.cos(angle)
        lobe_amp = amplitude * rng.uniform(0.6, 1.0)
        flux += render_compact(shape, (cy, cx), (lobe_sigma * 1.3, lobe_sigma), angle, lobe_amp)
    bridge = render_compact(shape, center, (separation + lobe_sigma, lobe_sigma * 0.6), angle, 0.35 * amplitude)
    return flux + bridge


def render_spurious(
    shape: Tuple[int, int],
    center: Tuple[float, float],
    radius: float,
    width: float,
    start: float,
    span: float,
    amplitude: float,
) -> np.ndarray:
    """明るい天体周辺のリング状アーチファクト (円弧)"""
    yy, xx = _grid(shape)
    dy, dx = yy - center[0], xx - center[1]
    r = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx) - start, 2 * np.pi)
    arc = (theta <= span).astype(np.float64)
    return amplitude * np.exp(-0.5 * ((r - radius) / width) ** 2) * arc


def correlated_noise(shape: Tuple[int, int], sigma: float, rng: np.random.Generator) -> np.ndarray:
    """ガウシアンフィルタで相関を持たせたノイズ (標準偏差をsigmaに合わせる)"""
    white = rng.standard_normal(shape)
    smooth = ndimage.gaussian_filter(white, NOISE_CORRELATION, mode="wrap")
    return smooth / smooth.std() * sigma


def _render_object(
    name: str, shape: Tuple[int, int], rng: np.random.Generator, noise: float
) -> np.ndarray:
    size = shape[0]
    unit = size / 32.0
    margin = 4 * unit
    center = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
    amplitude = rng.uniform(*PEAK_SNR_RANGE) * noise
    angle = rng.uniform(0, np.pi)

    if name == "compact":
        sigmas = (rng.uniform(0.8, 2.0) * unit, rng.uniform(0.8, 2.0) * unit)
        return render_compact(shape, center, sigmas, angle, amplitude)
    if name == "extended":
        return render_extended(
            shape, center,
            separation=rng.uniform(3.0, 6.0) * unit,
            angle=angle,
            lobe_sigma=rng.uniform(1.0, 2.0) * unit,
            amplitude=amplitude,
            n_lobes=int(rng.integers(2, 4)),
            rng=rng,
        )
    return render_spurious(
        shape, center,
        radius=rng.uniform(4.0, 8.0) * unit,
        width=rng.uniform(0.6, 1.0) * unit,
        start=rng.uniform(0, 2 * np.pi),
        span=rng.uniform(0.6, 1.8),
        amplitude=amplitude * 0.5,
    )


def make_cutout(
    index: int, size: int, class_mix: Sequence[float], rng: np.random.Generator
) -> Cutout:
    """1枚のカットアウトを生成"""
    shape = (size, size)
    noise = NOISE_SIGMA * float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    threshold = THRESHOLD_SIGMA * noise
    pixels = correlated_noise(shape, noise, rng)
    labels = np.zeros(shape, dtype=np.int64)
    objects = []

    n_objects = min(1 + int(rng.poisson(MEAN_OBJECTS)), MAX_OBJECTS)
    for _ in range(n_objects):
        name = CLASS_NAMES[int(rng.choice(len(CLASS_NAMES), p=class_mix))]
        flux = _render_object(name, shape, rng, noise)
        footprint = flux >= threshold
        if not footprint.any():
            continue
        pixels = pixels + flux
        # 重なりは後の天体が優先
        labels[footprint] = Config.CLASS_CODES[name]
        objects.append(ObjectRecord(name, footprint))

    item_id = f"toy_{index:05d}"
    meta = {"item_id": item_id, "noise_sigma": noise, "threshold": threshold}
    return Cutout(Image2D(pixels.astype(np.float32), provenance=item_id), SegMask(labels), meta, objects)


def generate_toy_dataset(n: int, size: int, class_mix: Sequence[float], seed: int) -> Dataset:
    """
    トイデータセットを生成

    Args:
        n (int): カットアウト数
        size (int): 一辺のピクセル数 (32, 64, 128)
        class_mix (Sequence[float]): compact/extended/spurious の出現確率
        seed (int): シード

    Returns:
        Dataset: 生成したデータセット (前処理前)
    """
    if size not in ALLOWED_SIZES:
        raise ParameterError(f"sizeは{ALLOWED_SIZES}のいずれかである必要があります", str(size))
    mix = np.asarray(class_mix, dtype=np.float64)
    if mix.shape != (len(CLASS_NAMES),) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-6:
        raise ParameterError("class_mixは合計1の3要素の確率である必要があります", str(list(class_mix)))
    if n < 0:
        raise ParameterError("nは0以上である必要があります", str(n))

    rng = np.random.default_rng(seed)
    items = [make_cutout(i, size, mix / mix.sum(), rng) for i in range(n)]
    ds = Dataset(items, split_seed=None)
    logger.info(f"トイデータセット生成: {n}件 ({size}x{size})", extra={"class_counts": ds.class_counts})
    return ds
