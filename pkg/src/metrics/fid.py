"""
Fréchet距離 (ドメイン特徴空間でのFID)
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from ..utils.errors import DataError, NumericError, ShapeError

logger = logging.getLogger(__name__)

EIGENVALUE_TOLERANCE = 1e-6


@dataclass
class FeatureSet:
    """N × D の特徴ベクトル"""

    vectors: np.ndarray
    extractor_id: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeError("特徴ベクトルは2次元配列である必要があります", str(self.vectors.shape))
        if not np.all(np.isfinite(self.vectors)):
            raise NumericError("特徴ベクトルに非有限値が含まれています", self.extractor_id)

    @property
    def n(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def statistics(self) -> Tuple[np.ndarray, np.ndarray]:
        """平均と共分散 (不偏推定)"""
        if self.n < 2:
            raise DataError("共分散の推定には2件以上の特徴が必要です", str(self.n))
        mu = self.vectors.mean(axis=0)
        sigma = np.atleast_2d(np.cov(self.vectors, rowvar=False))
        return mu, sigma


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """対称半正定値行列の平方根 (固有分解、微小な負の固有値は0に丸める)"""
    eigvals, eigvecs = linalg.eigh((matrix + matrix.T) / 2.0)
    eigvals = _clip_eigenvalues(eigvals)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def _clip_eigenvalues(eigvals: np.ndarray) -> np.ndarray:
    scale = max(1.0, float(np.abs(eigvals).max(initial=0.0)))
    if eigvals.size and eigvals.min() < -EIGENVALUE_TOLERANCE * scale:
        raise NumericError("共分散積の固有値が負です", f"min eigenvalue={eigvals.min():.3e}")
    return np.clip(eigvals, 0.0, None)


def frechet_distance(mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray) -> float:
    """
    |μ_a − μ_b|² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})

    tr((Σ_a Σ_b)^{1/2}) は対称行列 Σ_a^{1/2} Σ_b Σ_a^{1/2} の固有値の平方根の和として計算する。
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ShapeError("特徴次元が一致しません", f"{mu_a.shape} vs {mu_b.shape}")

    root_a = _psd_sqrt(sigma_a)
    product = root_a @ sigma_b @ root_a
    eigvals = _clip_eigenvalues(linalg.eigvalsh((product + product.T) / 2.0))
    trace_sqrt = float(np.sum(np.sqrt(eigvals)))

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """
    2つの特徴集合間のFID

    Args:
        a (FeatureSet): 実画像の特徴
        b (FeatureSet): 生成画像の特徴

    Returns:
        float: FID (0以上)
    """
    if a.dim != b.dim:
        raise ShapeError("特徴次元が一致しません", f"{a.dim} != {b.dim}")
    for name, features in (("a", a), ("b", b)):
        if features.n < features.dim + 1:
            logger.warning(
                f"特徴数 {features.n} が次元+1 ({features.dim + 1}) 未満のため共分散はランク落ちです",
                extra={"set": name, "n": features.n, "dim": features.dim},
            )
    mu_a, sigma_a = a.statistics()
    mu_b, sigma_b = b.statistics()
    return frechet_distance(mu_a, sigma_a, mu_b, sigma_b)
