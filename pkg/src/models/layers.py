"""
共通レイヤー
残差ブロック、自己注意・交差注意、タイムステップ埋め込み
"""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def group_count(channels: int) -> int:
    return math.gcd(8, channels)


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """正弦波タイムステップ埋め込み"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, device=timesteps.device, dtype=torch.float32) / half
    )
    args = timesteps.float()[:, None] * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    softmax(QK^T / sqrt(d)) V

    Args:
        q (torch.Tensor): (B, heads, Nq, d)
        k (torch.Tensor): (B, heads, Nk, d)
        v (torch.Tensor): (B, heads, Nk, d)

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: (出力 (B, heads, Nq, d), 注意重み (B, heads, Nq, Nk))
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class ResBlock(nn.Module):
    """3つの畳み込みと残差接続 (タイムステップ埋め込みは任意)"""

    def __init__(self, in_channels: int, out_channels: int, time_emb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm3 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv3 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.time_mlp = (
            nn.Sequential(nn.SiLU(), nn.Linear(time_emb_dim, out_channels)) if time_emb_dim else None
        )
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_mlp is not None and t_emb is not None:
            h = h + self.time_mlp(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        h = self.conv3(F.silu(self.norm3(h)))
        return h + self.skip(x)


class SpatialAttention(nn.Module):
    """
    特徴マップ上の多頭注意

    context_dim を指定すると交差注意になり、K・Vは外部の埋め込み系列から射影される。
    """

    def __init__(self, channels: int, num_heads: int = 4, context_dim: Optional[int] = None):
        super().__init__()
        if channels % num_heads:
            num_heads = 1
        self.num_heads = num_heads
        self.context_dim = context_dim
        self.norm = nn.GroupNorm(group_count(channels), channels)
        source_dim = context_dim if context_dim else channels
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(source_dim, channels, bias=False)
        self.to_v = nn.Linear(source_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        if self.context_dim:
            if context is None:
                return x
            source = context if context.dim() == 3 else context[:, None, :]
        else:
            source = tokens

        q, k, v = self._heads(self.to_q(tokens)), self._heads(self.to_k(source)), self._heads(self.to_v(source))
        out, _ = scaled_dot_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
