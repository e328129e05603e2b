"""
FID用の特徴抽出器
残差畳み込みバックボーン + 射影ヘッド (自己教師あり学習用)
"""

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from ..utils.checkpoint import load_checkpoint
from .layers import Downsample, ResBlock, group_count

EXTRACTOR_KIND = "extractor"


class ExtractorConfig(BaseModel):
    """特徴抽出器の設定"""

    model_config = ConfigDict(extra="forbid")

    feature_dim: int = Field(default=512, description="特徴ベクトルの次元")
    base_channels: int = 32
    projection_dim: int = 128
    temperature: float = Field(default=0.5, gt=0)
    crop_fraction: float = Field(default=0.75, gt=0, le=1, description="ランダムクロップの一辺の比率")
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3


class FeatureExtractor(nn.Module):
    """(B,1,H,W) -> (B, feature_dim)"""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.stem = nn.Conv2d(1, c, 3, padding=1)
        self.blocks = nn.Sequential(
            ResBlock(c, c),
            Downsample(c),
            ResBlock(c, 2 * c),
            Downsample(2 * c),
            ResBlock(2 * c, 4 * c),
        )
        self.norm = nn.GroupNorm(group_count(4 * c), 4 * c)
        self.fc = nn.Linear(4 * c, cfg.feature_dim)
        self.projection = nn.Sequential(
            nn.Linear(cfg.feature_dim, cfg.feature_dim),
            nn.ReLU(),
            nn.Linear(cfg.feature_dim, cfg.projection_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm(self.blocks(self.stem(x))))
        return self.fc(h.mean(dim=(2, 3)))

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(self(x))


def load_extractor(path: str, device: str = "cpu") -> FeatureExtractor:
    """チェックポイントから特徴抽出器を復元"""
    ckpt = load_checkpoint(path, EXTRACTOR_KIND)
    model = FeatureExtractor(ExtractorConfig(**ckpt.config))
    model.load_state_dict(ckpt.sub_tensors("model"))
    return model.to(device).eval()
