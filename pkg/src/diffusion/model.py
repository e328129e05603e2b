"""
条件付き潜在拡散モデル
ノイズ予測U-Netと背景条件エンコーダーをまとめ、学習・サンプリングの単位とする
"""

from typing import Literal, Optional, Tuple, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from config.settings import Config
from ..autoencoder.ops import LatentGrid
from ..conditioning.condition import ConditionBundle
from ..conditioning.encoder import BackgroundEncoder
from .unet import DenoiserConfig, DenoiserNet

DESK_SCHEDULE = Config.get_schedule("desk")


class DiffusionConfig(BaseModel):
    """拡散モデルの学習設定"""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["unconditional", "mask", "full"] = Field(
        default="full", description="unconditional: 条件なし / mask: マスクのみ / full: マスク + 背景"
    )
    timesteps: int = DESK_SCHEDULE["timesteps"]
    beta_start: float = DESK_SCHEDULE["beta_start"]
    beta_end: float = DESK_SCHEDULE["beta_end"]
    steps: int = 5000
    batch_size: int = 8
    learning_rate: float = 2e-4
    log_every: int = 50
    target_loss: float = 0.0
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2)
    attention_levels: Tuple[int, ...] = (1,)
    num_heads: int = 4
    time_emb_dim: int = 64
    embedding_dim: int = 128
    background_channels: int = 16
    num_classes: int = Config.get_setting("num_classes")

    @property
    def uses_mask(self) -> bool:
        return self.mode in ("mask", "full")

    @property
    def uses_background(self) -> bool:
        return self.mode == "full"

    def denoiser_config(self, latent_channels: int) -> DenoiserConfig:
        return DenoiserConfig(
            latent_channels=latent_channels,
            mask_channels=self.num_classes + 1 if self.uses_mask else 0,
            context_dim=self.embedding_dim if self.uses_background else 0,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            attention_levels=self.attention_levels,
            num_heads=self.num_heads,
            time_emb_dim=self.time_emb_dim,
        )


class RADiffModel(nn.Module):
    """U-Net + 背景エンコーダー (背景は交差注意、マスクは入力連結)"""

    def __init__(
        self,
        cfg: DiffusionConfig,
        latent_channels: int,
        f: int,
        latent_hw: Tuple[int, int] = (8, 8),
        latent_scale: float = 1.0,
    ):
        super().__init__()
        self.cfg = cfg
        self.f = f
        self.latent_channels = latent_channels
        self.latent_hw = tuple(latent_hw)
        self.unet = DenoiserNet(cfg.denoiser_config(latent_channels))
        self.background_encoder = (
            BackgroundEncoder(cfg.embedding_dim, cfg.background_channels) if cfg.uses_background else None
        )
        self.register_buffer("latent_scale", torch.tensor(float(latent_scale)))

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        background: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Args:
            z_t: (B, c_z, h, w)
            t: (B,)
            mask: (B, N_c+1, h, w) マスクチャネル
            background: (B, 1, H, W) 背景画像 (E_cで埋め込む)
        """
        if not self.cfg.uses_mask:
            mask = None
        context = None
        if self.background_encoder is not None and background is not None:
            context = self.background_encoder(background)
        return self.unet(z_t, t, mask=mask, context=context)


def predict_noise(
    net: Union[RADiffModel, DenoiserNet],
    z_t: Union[LatentGrid, torch.Tensor],
    t: Union[int, torch.Tensor],
    cond: Optional[ConditionBundle] = None,
) -> torch.Tensor:
    """
    ε̂ = ε_θ(z_t, t, c)

    無条件のネットワークは条件を完全に無視する。背景埋め込みがある場合のみ交差注意が働く。

    Args:
        net: ノイズ予測ネットワーク
        z_t: (c_z, h, w) または (B, c_z, h, w)
        t: タイムステップ
        cond: 条件バンドル (Noneまたは空なら無条件)

    Returns:
        torch.Tensor: z_tと同形状の予測ノイズ
    """
    unet = net.unet if isinstance(net, RADiffModel) else net
    values = z_t.values if isinstance(z_t, LatentGrid) else z_t
    batched = values.dim() == 4
    x = values if batched else values[None]
    device = next(unet.parameters()).device
    x = x.to(device)
    batch = x.shape[0]

    mask = context = None
    if cond is not None and unet.cfg.mask_channels and cond.mask is not None:
        mask = cond.mask.values.to(device)
        mask = mask if mask.dim() == 4 else mask[None].expand(batch, -1, -1, -1)
    if cond is not None and unet.cfg.context_dim and cond.background is not None:
        context = cond.background.vector.to(device)
        context = context if context.dim() == 2 else context[None].expand(batch, -1)

    t_tensor = torch.as_tensor(t, device=device).long()
    if t_tensor.dim() == 0:
        t_tensor = t_tensor.expand(batch)
    eps_hat = unet(x, t_tensor, mask=mask, context=context)
    return eps_hat if batched else eps_hat[0]
