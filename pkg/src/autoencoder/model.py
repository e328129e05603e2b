"""
KL正則化オートエンコーダー
ダウンサンプリング2ブロック → ボトルネック (Res, Attn, Res) → アップサンプリング2ブロック
"""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..models.layers import Downsample, ResBlock, SpatialAttention, Upsample, group_count

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class AutoencoderConfig(BaseModel):
    """オートエンコーダーの設定"""

    model_config = ConfigDict(extra="forbid")

    f: int = Field(default=4, description="圧縮率 (2のべき乗)")
    c_z: int = Field(default=4, description="潜在チャネル数")
    base_channels: int = Field(default=32)
    num_down_blocks: Optional[int] = Field(default=None, description="指定時はlog2(f)と一致する必要がある")
    attention_levels: Tuple[int, ...] = Field(
        default=(), description="ボトルネック以外で自己注意を入れる解像度レベル"
    )
    num_heads: int = 4
    w_kl: float = 1e-6
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    target_rec: float = Field(default=0.0, description="学習L_recがこの値を下回ったら終了")
    in_channels: int = 1

    @field_validator("f")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 2 or value & (value - 1):
            raise ValueError("fは2以上の2のべき乗である必要があります")
        return value

    @model_validator(mode="after")
    def _blocks_match(self) -> "AutoencoderConfig":
        expected = int(math.log2(self.f))
        if self.num_down_blocks is not None and self.num_down_blocks != expected:
            raise ValueError(f"ダウンサンプリングブロック数 {self.num_down_blocks} が f={self.f} と一致しません")
        self.num_down_blocks = expected
        if any(level < 0 or level >= expected for level in self.attention_levels):
            raise ValueError("attention_levelsが範囲外です")
        return self

    def level_channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * 2 ** min(i, 1) for i in range(self.num_down_blocks + 1))


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        channels = cfg.level_channels()
        self.conv_in = nn.Conv2d(cfg.in_channels, channels[0], 3, padding=1)
        self.down = nn.ModuleList()
        for level in range(cfg.num_down_blocks):
            self.down.append(nn.ModuleDict({
                "res": ResBlock(channels[level], channels[level + 1]),
                "attn": SpatialAttention(channels[level + 1], cfg.num_heads)
                if level in cfg.attention_levels else nn.Identity(),
                "down": Downsample(channels[level + 1]),
            }))
        mid = channels[-1]
        self.mid_res1 = ResBlock(mid, mid)
        self.mid_attn = SpatialAttention(mid, cfg.num_heads)
        self.mid_res2 = ResBlock(mid, mid)
        self.norm_out = nn.GroupNorm(group_count(mid), mid)
        self.conv_out = nn.Conv2d(mid, 2 * cfg.c_z, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(x)
        for block in self.down:
            h = block["down"](block["attn"](block["res"](h)))
        h = self.mid_res2(self.mid_attn(self.mid_res1(h)))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        channels = cfg.level_channels()
        mid = channels[-1]
        self.conv_in = nn.Conv2d(cfg.c_z, mid, 3, padding=1)
        self.mid_res1 = ResBlock(mid, mid)
        self.mid_attn = SpatialAttention(mid, cfg.num_heads)
        self.mid_res2 = ResBlock(mid, mid)
        self.up = nn.ModuleList()
        for level in reversed(range(cfg.num_down_blocks)):
            self.up.append(nn.ModuleDict({
                "up": Upsample(channels[level + 1]),
                "res": ResBlock(channels[level + 1], channels[level]),
                "attn": SpatialAttention(channels[level], cfg.num_heads)
                if level in cfg.attention_levels else nn.Identity(),
            }))
        self.norm_out = nn.GroupNorm(group_count(channels[0]), channels[0])
        self.conv_out = nn.Conv2d(channels[0], cfg.in_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.mid_res2(self.mid_attn(self.mid_res1(self.conv_in(z))))
        for block in self.up:
            h = block["attn"](block["res"](block["up"](h)))
        return self.conv_out(F.silu(self.norm_out(h)))


class AutoencoderKL(nn.Module):
    """画素空間 <-> 潜在空間"""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode_moments(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B,1,H,W) -> 平均と対数分散 (B,c_z,H/f,W/f)"""
        mean, log_variance = torch.chunk(self.encoder(x), 2, dim=1)
        return mean, torch.clamp(log_variance, LOGVAR_MIN, LOGVAR_MAX)

    def decode_tensor(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        out = self.decoder(z)
        # 出力はsigmoidではなくクランプで[0,1]に収める
        return torch.clamp(out, 0.0, 1.0) if clamp else out

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        mean, log_variance = self.encode_moments(x)
        noise = torch.randn(mean.shape, generator=generator, device=mean.device, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * log_variance) * noise
        return self.decode_tensor(z), mean, log_variance
