"""
フラックスのスケーリングと背景雑音の推定
"""

import logging
from dataclasses import replace
from typing import Optional, Union

import numpy as np
from astropy.stats import sigma_clipped_stats
from pydantic import BaseModel, ConfigDict, Field

from config.settings import Config
from ..dataio.types import Image2D
from ..utils.errors import DegenerateMapError, ParameterError
from .stamps import ObjectStamp

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator]

CLIP_SIGMA = 3.0
CLIP_ITERS = 5


class FluxModel(BaseModel):
    """k ~ Exp(λ) を cap で打ち切り、スタンプを σ_bg·k 倍する"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lam: float = Field(default=Config.FLUX_MODEL["lam"], gt=0, alias="lambda")
    cap: float = Field(default=Config.FLUX_MODEL["cap"], gt=0)
    sigma_bg: Optional[float] = Field(default=None, gt=0, description="背景フラックスの標準偏差 (Jy/beam)")
    max_draws: int = Field(default=Config.FLUX_MODEL["max_attempts"], ge=1, description="棄却サンプリングの上限回数")


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_k(fm: FluxModel, rng: SeedLike, size: Optional[int] = None) -> Union[float, np.ndarray]:
    """
    打ち切り指数分布から棄却法で k を引く

    Args:
        fm (FluxModel): フラックスモデル
        rng: シードまたはGenerator
        size (Optional[int]): Noneならスカラーを返す

    Returns:
        k (スカラーまたは配列)
    """
    rng = _rng(rng)
    count = 1 if size is None else int(size)
    accepted = np.empty(0, dtype=np.float64)
    draws = 0
    while accepted.size < count:
        if draws >= fm.max_draws * max(count, 1):
            raise ParameterError("kの棄却サンプリングが収束しません", f"lam={fm.lam}, cap={fm.cap}")
        batch = rng.exponential(1.0 / fm.lam, size=count - accepted.size)
        draws += batch.size
        accepted = np.concatenate([accepted, batch[batch <= fm.cap]])
    return float(accepted[0]) if size is None else accepted


def rescale_flux(
    stamp: ObjectStamp,
    fm: FluxModel,
    seed: SeedLike,
    k: Optional[float] = None,
) -> ObjectStamp:
    """
    スタンプの画素を σ_bg·k 倍する (前処理単位 -> Jy/beam)

    Args:
        stamp (ObjectStamp): 切り出したスタンプ
        fm (FluxModel): sigma_bg を持つフラックスモデル
        seed: kのシードまたはGenerator
        k (Optional[float]): 指定時はサンプリングせずにこの値を使う

    Returns:
        ObjectStamp: kを記録した新しいスタンプ
    """
    if fm.sigma_bg is None:
        raise ParameterError("sigma_bgが設定されていません")
    k = float(sample_k(fm, seed)) if k is None else float(k)
    return replace(stamp, pixels=stamp.pixels * fm.sigma_bg * k, k=k)


def measure_background_sigma(bg: Image2D) -> float:
    """
    シグマクリップ (3σ、5回) した背景の標準偏差

    Args:
        bg (Image2D): 背景マップ

    Returns:
        float: σ_bg
    """
    data = bg.pixels.astype(np.float64)
    finite = data[np.isfinite(data)]
    if finite.size == 0:
        raise DegenerateMapError("有限な画素がありません", bg.provenance)
    _, _, std = sigma_clipped_stats(finite, sigma=CLIP_SIGMA, maxiters=CLIP_ITERS)
    if not np.isfinite(std) or std <= 0:
        raise DegenerateMapError("背景の標準偏差が0です (一定値またはすべてクリップ)", f"std={std}")
    logger.info(f"背景σ = {std:.4g}", extra={"sigma_bg": float(std)})
    return float(std)
