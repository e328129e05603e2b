"""
ノイズ予測U-Net
タイムステップ埋め込みを各残差ブロックに加え、注意レベルでは自己注意の直後に交差注意を置く
"""

from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..models.layers import Downsample, ResBlock, SpatialAttention, Upsample, group_count, timestep_embedding
from ..utils.errors import ShapeError


class DenoiserConfig(BaseModel):
    """U-Netの構成"""

    model_config = ConfigDict(extra="forbid")

    latent_channels: int = 4
    mask_channels: int = Field(default=0, description="連結するマスクチャネル数 (0 = マスクなし)")
    context_dim: int = Field(default=0, description="交差注意の埋め込み幅 (0 = 交差注意なし)")
    in_channels: Optional[int] = Field(default=None, description="指定時は latent_channels + mask_channels と一致")
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2)
    attention_levels: Tuple[int, ...] = (1,)
    num_heads: int = 4
    time_emb_dim: int = 64

    @model_validator(mode="after")
    def _check_channels(self) -> "DenoiserConfig":
        expected = self.latent_channels + self.mask_channels
        if self.in_channels is not None and self.in_channels != expected:
            raise ValueError(
                f"入力チャネル数 {self.in_channels} が c_z + マスクチャネル = {expected} と一致しません"
            )
        self.in_channels = expected
        if self.mask_channels == 1 or self.mask_channels < 0:
            raise ValueError("mask_channelsは0またはクラス数+1である必要があります")
        if any(level < 0 or level >= len(self.channel_multipliers) for level in self.attention_levels):
            raise ValueError("attention_levelsが範囲外です")
        return self


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: DenoiserConfig, has_attn: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.time_emb_dim)
        self.attn = SpatialAttention(out_ch, cfg.num_heads) if has_attn else None
        self.cross = SpatialAttention(out_ch, cfg.num_heads, cfg.context_dim) if has_attn and cfg.context_dim else None
        self.down = Downsample(out_ch)

    def forward(self, x, t_emb, context):
        h = self.res(x, t_emb)
        if self.attn is not None:
            h = self.attn(h)
        if self.cross is not None:
            h = self.cross(h, context)
        return self.down(h), h


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, cfg: DenoiserConfig, has_attn: bool):
        super().__init__()
        self.up = Upsample(in_ch)
        self.res = ResBlock(in_ch + skip_ch, out_ch, cfg.time_emb_dim)
        self.attn = SpatialAttention(out_ch, cfg.num_heads) if has_attn else None
        self.cross = SpatialAttention(out_ch, cfg.num_heads, cfg.context_dim) if has_attn and cfg.context_dim else None

    def forward(self, x, skip, t_emb, context):
        h = self.res(torch.cat([self.up(x), skip], dim=1), t_emb)
        if self.attn is not None:
            h = self.attn(h)
        if self.cross is not None:
            h = self.cross(h, context)
        return h


class DenoiserNet(nn.Module):
    """ε_θ(z_t, t, c)"""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        temb = cfg.time_emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb * 4), nn.SiLU(), nn.Linear(temb * 4, temb))
        levels = [cfg.base_channels * m for m in cfg.channel_multipliers]

        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        in_ch = cfg.base_channels
        for level, out_ch in enumerate(levels):
            self.down_blocks.append(DownBlock(in_ch, out_ch, cfg, level in cfg.attention_levels))
            in_ch = out_ch

        mid = levels[-1]
        self.mid_res1 = ResBlock(mid, mid, temb)
        self.mid_attn = SpatialAttention(mid, cfg.num_heads)
        self.mid_cross = SpatialAttention(mid, cfg.num_heads, cfg.context_dim) if cfg.context_dim else None
        self.mid_res2 = ResBlock(mid, mid, temb)

        self.up_blocks = nn.ModuleList()
        for level in reversed(range(len(levels))):
            self.up_blocks.append(UpBlock(in_ch, levels[level], levels[level], cfg, level in cfg.attention_levels))
            in_ch = levels[level]

        self.norm_out = nn.GroupNorm(group_count(in_ch), in_ch)
        self.conv_out = nn.Conv2d(in_ch, cfg.latent_channels, 3, padding=1)
        # 未学習時の予測を0にする (初期損失 ≈ Var[ε])
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.cfg.channel_multipliers)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        context: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Args:
            z_t (torch.Tensor): (B, c_z, h, w)
            t (torch.Tensor): (B,) のタイムステップ (1始まり)
            mask (Optional[torch.Tensor]): (B, N_c+1, h, w) のマスクチャネル
            context (Optional[torch.Tensor]): (B, context_dim) の背景埋め込み

        Returns:
            torch.Tensor: 予測ノイズ (z_tと同形状)
        """
        cfg = self.cfg
        if z_t.dim() != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ShapeError("潜在の形状が不正です", f"{tuple(z_t.shape)}, c_z={cfg.latent_channels}")
        if z_t.shape[-1] % self.downsampling or z_t.shape[-2] % self.downsampling:
            raise ShapeError(f"潜在サイズは{self.downsampling}で割り切れる必要があります", str(tuple(z_t.shape)))

        x = z_t
        if cfg.mask_channels:
            if mask is None or mask.shape != (z_t.shape[0], cfg.mask_channels, *z_t.shape[2:]):
                got = None if mask is None else tuple(mask.shape)
                raise ShapeError(f"マスクチャネル ({cfg.mask_channels}) が必要です", str(got))
            x = torch.cat([z_t, mask.to(z_t.dtype)], dim=1)
        elif mask is not None:
            raise ShapeError("このネットワークはマスク入力を受け付けません")
        if context is not None and context.shape[-1] != cfg.context_dim:
            raise ShapeError("背景埋め込みの幅が一致しません", f"{context.shape[-1]} != {cfg.context_dim}")

        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        t_emb = self.time_mlp(timestep_embedding(t, cfg.time_emb_dim).to(z_t.dtype))

        h = self.conv_in(x)
        skips = []
        for block in self.down_blocks:
            h, skip = block(h, t_emb, context)
            skips.append(skip)
        h = self.mid_attn(self.mid_res1(h, t_emb))
        if self.mid_cross is not None:
            h = self.mid_cross(h, context)
        h = self.mid_res2(h, t_emb)
        for block in self.up_blocks:
            h = block(h, skips.pop(), t_emb, context)
        return self.conv_out(F.silu(self.norm_out(h)))
