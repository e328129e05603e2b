"""
背景条件エンコーダー E_c
小さな畳み込み → 大域平均プーリング → 埋め込み幅への射影
"""

import torch
import torch.nn as nn

from ..models.layers import group_count

DEFAULT_EMBEDDING_DIM = 128


class BackgroundEncoder(nn.Module):
    """背景画像 (B,1,H,W) -> 埋め込み (B, embedding_dim)"""

    def __init__(self, embedding_dim: int = DEFAULT_EMBEDDING_DIM, base_channels: int = 16):
        super().__init__()
        self.embedding_dim = embedding_dim
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.GroupNorm(group_count(2 * c), 2 * c),
            nn.SiLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.proj = nn.Linear(4 * c + 2, embedding_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # 大域統計 (平均・標準偏差) も特徴に加える
        flat = image.flatten(1)
        stats = torch.stack([flat.mean(dim=1), flat.std(dim=1)], dim=-1)
        return self.proj(torch.cat([self.features(image), stats], dim=-1))
