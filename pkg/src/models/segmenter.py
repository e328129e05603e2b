"""
セマンティックセグメンテーション用の小さなU-Net
"""

import os
from typing import Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config.settings import Config
from ..utils.checkpoint import load_checkpoint
from ..utils.errors import DependencyError
from .layers import Downsample, ResBlock, Upsample

SEGMENTER_KIND = "segmenter"


class SegmenterConfig(BaseModel):
    """セグメンターの設定"""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Config.get_setting("num_classes")
    base_channels: int = 16
    depth: int = Field(default=2, description="ダウンサンプリング段数 (入力は2**depthで割り切れる必要がある)")
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    class_weights: Optional[Tuple[float, ...]] = Field(
        default=None, description="クロスエントロピーのクラス重み (背景を含むN_c+1個)"
    )

    @field_validator("depth")
    @classmethod
    def _positive_depth(cls, value: int) -> int:
        if value < 1:
            raise ValueError("depthは1以上である必要があります")
        return value

    @field_validator("class_weights")
    @classmethod
    def _positive_weights(cls, value):
        if value is not None and any(w <= 0 for w in value):
            raise ValueError("class_weightsは正である必要があります")
        return value


class SegmenterNet(nn.Module):
    """(B,1,H,W) -> (B, N_c+1, H, W) のロジット"""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        channels = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.conv_in = nn.Conv2d(1, channels[0], 3, padding=1)
        self.down = nn.ModuleList()
        for level in range(cfg.depth):
            self.down.append(nn.ModuleList([
                ResBlock(channels[max(level - 1, 0)], channels[level]),
                Downsample(channels[level]),
            ]))
        self.mid = ResBlock(channels[cfg.depth - 1], channels[cfg.depth])
        self.up = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            self.up.append(nn.ModuleList([
                Upsample(channels[level + 1]),
                ResBlock(channels[level + 1] + channels[level], channels[level]),
            ]))
        self.conv_out = nn.Conv2d(channels[0], cfg.num_classes + 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(x)
        skips = []
        for res, down in self.down:
            h = res(h)
            skips.append(h)
            h = down(h)
        h = self.mid(h)
        for up, res in self.up:
            h = res(torch.cat([up(h), skips.pop()], dim=1))
        return self.conv_out(h)


def load_segmenter(path: str, device: str = "cpu") -> SegmenterNet:
    """チェックポイントからセグメンターを復元 (見つからなければ DependencyError)"""
    if not path or not os.path.exists(path):
        raise DependencyError("セグメンターのチェックポイントが見つかりません", str(path))
    ckpt = load_checkpoint(path, SEGMENTER_KIND)
    model = SegmenterNet(SegmenterConfig(**ckpt.config))
    model.load_state_dict(ckpt.sub_tensors("model"))
    return model.to(device).eval()


def predict_labels(net: SegmenterNet, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """(N,1,H,W) -> (N,H,W) のargmaxラベル"""
    device = next(net.parameters()).device
    net.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = net(images[start:start + batch_size].to(device))
            outputs.append(torch.argmax(logits, dim=1).cpu())
    return torch.cat(outputs) if outputs else torch.zeros((0,) + tuple(images.shape[-2:]), dtype=torch.long)
