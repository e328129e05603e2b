"""
マスク生成用の画素空間DDPM
one-hotのクラス平面を[-1,1]の連続値として拡散させ、サンプルはargmaxで整数マスクに戻す
"""

import logging
import math
import os
from typing import Iterable, List, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from tqdm import tqdm

from config.settings import Config
from ..conditioning.condition import one_hot_planes
from ..dataio.types import CLASS_NAMES, EIGHT_CONNECTIVITY, SegMask, count_components
from ..diffusion.sampling import sample_latents
from ..diffusion.schedule import NoiseSchedule, diffusion_loss, make_schedule, q_sample
from ..diffusion.unet import DenoiserConfig, DenoiserNet
from ..utils.checkpoint import LossLog, load_checkpoint, prefixed, save_checkpoint
from ..utils.errors import DataError, DivergenceError, ParameterError, QualityError, ShapeError
from ..utils.seeding import derive_seed, seeded_build, torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "mask_ddpm"
LOSS_COLUMNS = ["step", "loss"]
DESK_SCHEDULE = Config.get_schedule("desk")


class MaskDDPMConfig(BaseModel):
    """マスクDDPMの設定"""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Config.get_setting("num_classes")
    timesteps: int = DESK_SCHEDULE["timesteps"]
    beta_start: float = DESK_SCHEDULE["beta_start"]
    beta_end: float = DESK_SCHEDULE["beta_end"]
    steps: int = 3000
    batch_size: int = 8
    learning_rate: float = 2e-4
    log_every: int = 50
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2)
    attention_levels: Tuple[int, ...] = (1,)
    num_heads: int = 4
    time_emb_dim: int = 64
    min_object_size: int = Field(default=4, ge=1, description="これより小さい連結成分は背景に戻す")
    max_rejection_rate: float = Field(default=0.9, gt=0, lt=1)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            latent_channels=self.num_classes + 1,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            attention_levels=self.attention_levels,
            num_heads=self.num_heads,
            time_emb_dim=self.time_emb_dim,
        )


def masks_to_planes(masks: Sequence[SegMask], num_classes: int) -> torch.Tensor:
    """整数マスク -> (N, N_c+1, H, W) の[-1,1]平面"""
    labels = torch.from_numpy(np.stack([m.labels for m in masks]))
    return one_hot_planes(labels, num_classes) * 2.0 - 1.0


def resolve_class_filter(class_filter: Union[str, Iterable[str], None]) -> Set[str]:
    """"compact" / "extended" / "both" / クラス名の集合 -> クラス名の集合 (Noneは全クラス)"""
    if class_filter is None:
        return set(CLASS_NAMES)
    names = {class_filter} if isinstance(class_filter, str) else set(class_filter)
    if "both" in names:
        names = (names - {"both"}) | {"compact", "extended"}
    unknown = names - set(CLASS_NAMES)
    if unknown:
        raise ParameterError("未知のクラスフィルタです", str(sorted(unknown)))
    return names


def quantize_planes(
    planes: torch.Tensor,
    num_classes: int,
    allowed: Set[str],
    min_object_size: int,
) -> SegMask:
    """
    連続平面を整数マスクに量子化

    許可されないクラスの平面を0にしてからargmaxを取り、min_object_size未満の成分を背景に戻す。
    """
    values = ((planes.detach().cpu().to(torch.float64) + 1.0) / 2.0).clamp(0.0, 1.0)
    for code in range(1, num_classes + 1):
        if Config.class_name(code) not in allowed:
            values[code] = 0.0
    labels = torch.argmax(values, dim=0).numpy()
    for code in range(1, num_classes + 1):
        components, n = ndimage.label(labels == code, structure=EIGHT_CONNECTIVITY)
        if n == 0:
            continue
        sizes = np.bincount(components.ravel(), minlength=n + 1)[1:]
        for index, size in enumerate(sizes, start=1):
            if size < min_object_size:
                labels[components == index] = 0
    return SegMask(labels, num_classes)


def load_mask_ddpm(path: str, device: str = "cpu") -> Tuple[DenoiserNet, NoiseSchedule, MaskDDPMConfig, Tuple[int, int]]:
    """チェックポイントからマスクDDPMを復元"""
    ckpt = load_checkpoint(path, CHECKPOINT_KIND)
    cfg = MaskDDPMConfig(**ckpt.config)
    net = DenoiserNet(cfg.denoiser_config())
    net.load_state_dict(ckpt.sub_tensors("model"))
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    return net.to(device).eval(), sched, cfg, tuple(ckpt.extra["shape"])


def train_mask_ddpm(
    masks: Sequence[SegMask],
    cfg: MaskDDPMConfig,
    out_dir: str,
    seed: int = 0,
    device: str = "cpu",
    progress: bool = False,
) -> str:
    """
    マスク集合で無条件DDPMを学習 (オートエンコーダーは使わない)

    Args:
        masks (Sequence[SegMask]): 学習マスク (全て同じ形状)
        cfg (MaskDDPMConfig): 設定
        out_dir (str): 出力先
        seed (int): シード

    Returns:
        str: チェックポイントのパス
    """
    if not masks:
        raise DataError("学習マスクが空です")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ShapeError("マスクの形状が揃っていません", str(sorted(shapes)))
    shape = shapes.pop()
    factor = 2 ** len(cfg.channel_multipliers)
    if shape[0] % factor or shape[1] % factor:
        raise ShapeError(f"マスクサイズが{factor}で割り切れません", str(shape))

    x0_all = masks_to_planes(masks, cfg.num_classes).to(device)
    n = x0_all.shape[0]
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    net = seeded_build(lambda: DenoiserNet(cfg.denoiser_config()), seed).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    generator = torch_generator(seed + 1)
    log = LossLog(os.path.join(out_dir, "mask_ddpm_loss.csv"), LOSS_COLUMNS)

    running, count, last = 0.0, 0, float("nan")
    for step in tqdm(range(cfg.steps), disable=not progress, desc="mask-ddpm"):
        net.train()
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=generator)
        x0 = x0_all[idx]
        t = torch.randint(1, sched.T + 1, (idx.shape[0],), generator=generator)
        eps = torch.randn(x0.shape, generator=generator).to(device)
        loss = diffusion_loss(eps, net(q_sample(x0, t, eps, sched), t.to(device)))
        if not torch.isfinite(loss):
            raise DivergenceError("損失が発散しました", f"step={step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        last = loss.item()
        running += last
        count += 1
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            log.append(step=step + 1, loss=running / count)
            logger.info(f"マスクDDPMステップ {step + 1}/{cfg.steps}: loss={running / count:.5f}")
            running, count = 0.0, 0

    log.flush()
    return save_checkpoint(
        os.path.join(out_dir, "mask_ddpm.pt"),
        CHECKPOINT_KIND,
        cfg.model_dump(mode="json"),
        prefixed("model", net.state_dict()),
        step=cfg.steps,
        losses={"loss": last},
        extra={"shape": list(shape), "n_masks": n},
    )


def synthesize_masks(
    ckpt: Union[str, Tuple[DenoiserNet, NoiseSchedule, MaskDDPMConfig, Tuple[int, int]]],
    n: int,
    class_filter: Union[str, Iterable[str], None] = None,
    seed: int = 0,
    batch_size: int = 16,
) -> List[SegMask]:
    """
    マスクを生成

    物体画素を1つも含まないサンプルは棄却する。棄却率が max_rejection_rate を超えると QualityError。

    Args:
        ckpt: マスクDDPMのチェックポイントパス、または load_mask_ddpm の戻り値
        n (int): 生成枚数
        class_filter: 残すクラス ("compact", "extended", "both" など)
        seed (int): シード

    Returns:
        List[SegMask]: n 枚のマスク
    """
    if n < 0:
        raise ParameterError("生成枚数は0以上である必要があります", str(n))
    if n == 0:
        return []
    net, sched, cfg, shape = load_mask_ddpm(ckpt) if isinstance(ckpt, str) else ckpt
    allowed = resolve_class_filter(class_filter)
    device = next(net.parameters()).device
    max_attempts = int(math.ceil(n / (1.0 - cfg.max_rejection_rate)))

    accepted: List[SegMask] = []
    attempts = 0
    net.eval()
    while len(accepted) < n:
        if attempts >= max_attempts:
            raise QualityError(
                f"マスク生成の棄却率が{cfg.max_rejection_rate:.0%}を超えました",
                f"accepted={len(accepted)}, attempts={attempts}",
            )
        size = min(batch_size, max_attempts - attempts)
        seeds = [derive_seed(seed, f"mask-{attempts + i}") for i in range(size)]

        def predict(x: torch.Tensor, t: int) -> torch.Tensor:
            t_tensor = torch.full((x.shape[0],), t, dtype=torch.long, device=device)
            return net(x.to(device), t_tensor).cpu()

        with torch.no_grad():
            planes = sample_latents(predict, sched, (size, cfg.num_classes + 1, *shape), seeds)
        attempts += size
        for sample_planes in planes:
            mask = quantize_planes(sample_planes, cfg.num_classes, allowed, cfg.min_object_size)
            if mask.labels.any() and len(accepted) < n:
                accepted.append(mask)

    logger.info(f"マスク生成: {len(accepted)}枚 (試行 {attempts})", extra={"classes": sorted(allowed)})
    return accepted


def instance_statistics(masks: Sequence[SegMask]) -> pd.DataFrame:
    """
    クラスごとのインスタンス数と1マスクあたりの平均

    Returns:
        pd.DataFrame: class, instances, avg_per_mask
    """
    totals = {name: 0 for name in CLASS_NAMES}
    for mask in masks:
        for name, count in count_components(mask).items():
            totals[name] = totals.get(name, 0) + count
    rows = [
        {"class": name, "instances": total, "avg_per_mask": total / len(masks) if masks else 0.0}
        for name, total in totals.items()
    ]
    return pd.DataFrame(rows, columns=["class", "instances", "avg_per_mask"])
