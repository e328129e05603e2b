"""
潜在拡散モデルの学習
"""

import logging
import os
from typing import Optional, Union

import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..autoencoder.model import AutoencoderKL
from ..autoencoder.trainer import load_autoencoder
from ..conditioning.condition import one_hot_planes
from ..dataio.types import Dataset
from ..utils.checkpoint import LossLog, load_checkpoint, prefixed, save_checkpoint
from ..utils.errors import DataError, DivergenceError, ParameterError, ShapeError
from ..utils.seeding import seeded_build, torch_generator
from .model import DiffusionConfig, RADiffModel
from .schedule import NoiseSchedule, diffusion_loss, make_schedule, q_sample

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "diffusion"
LOSS_COLUMNS = ["step", "loss"]


def load_denoiser(path: str, device: str = "cpu"):
    """
    チェックポイントから拡散モデルとスケジュールを復元

    Returns:
        Tuple[RADiffModel, NoiseSchedule, str]: モデル、スケジュール、学習に使ったAEチェックポイントのパス
    """
    ckpt = load_checkpoint(path, CHECKPOINT_KIND)
    cfg = DiffusionConfig(**ckpt.config)
    extra = ckpt.extra
    model = RADiffModel(
        cfg,
        latent_channels=int(extra["latent_channels"]),
        f=int(extra["f"]),
        latent_hw=tuple(extra["latent_hw"]),
    )
    model.load_state_dict(ckpt.sub_tensors("model"))
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    return model.to(device).eval(), sched, extra.get("ae_checkpoint", "")


def _encode_dataset(ae: AutoencoderKL, images: torch.Tensor, batch_size: int):
    means, stds = [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            mean, log_variance = ae.encode_moments(images[start:start + batch_size])
            means.append(mean)
            stds.append(torch.exp(0.5 * log_variance))
    return torch.cat(means), torch.cat(stds)


def train_diffusion(
    ds: Dataset,
    ae_checkpoint: Union[str, AutoencoderKL],
    sched: Optional[NoiseSchedule],
    cfg: DiffusionConfig,
    out_dir: str,
    seed: int = 0,
    resume_from: Optional[str] = None,
    device: str = "cpu",
    progress: bool = False,
) -> str:
    """
    ノイズ予測の二乗誤差を最小化して学習

    各ステップで画像を選び、AEで z0 に符号化し、t ~ U[1,T] と ε を引いて
    q_sample で z_t を作り、ε_θ(z_t, t, c) との MSE を下げる。
    条件 c はマスク (潜在解像度のone-hot) と、その画像自身を背景とした埋め込み。

    Args:
        ds (Dataset): 前処理済みの学習データ
        ae_checkpoint: 学習済みAEまたはそのチェックポイントパス
        sched (Optional[NoiseSchedule]): スケジュール (Noneなら設定から作成)
        cfg (DiffusionConfig): 設定
        out_dir (str): 出力先
        seed (int): シード
        resume_from (Optional[str]): 再開するチェックポイント
        device (str): 計算デバイス
        progress (bool): 進捗バーを表示するか

    Returns:
        str: チェックポイントのパス
    """
    if len(ds) == 0:
        raise DataError("学習データが空です")
    if sched is None:
        sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    elif sched.T != cfg.timesteps:
        raise ParameterError("スケジュールのTが設定と一致しません", f"{sched.T} != {cfg.timesteps}")

    if isinstance(ae_checkpoint, AutoencoderKL):
        ae, ae_path = ae_checkpoint.to(device).eval(), ""
    else:
        ae, ae_path = load_autoencoder(ae_checkpoint, device), ae_checkpoint
    f = ae.cfg.f

    images, masks = ds.to_tensors()
    n, _, height, width = images.shape
    if height % f or width % f:
        raise ShapeError(f"画像サイズが圧縮率f={f}で割り切れません", f"{height}x{width}")
    images = images.to(device)

    z_mean, z_std = _encode_dataset(ae, images, cfg.batch_size)
    latent_channels = int(z_mean.shape[1])
    latent_hw = (height // f, width // f)
    mask_channels = F.avg_pool2d(one_hot_planes(masks, cfg.num_classes), kernel_size=f).to(device)

    latent_scale = 1.0 / max(float(z_mean.std()), 1e-8)
    model = seeded_build(
        lambda: RADiffModel(cfg, latent_channels, f, latent_hw, latent_scale), seed
    ).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch_generator(seed + 1)
    start_step = 0

    ckpt_path = os.path.join(out_dir, "diffusion.pt")
    log = LossLog(os.path.join(out_dir, "diffusion_loss.csv"), LOSS_COLUMNS, append=resume_from is not None)
    if resume_from:
        ckpt = load_checkpoint(resume_from, CHECKPOINT_KIND)
        model.load_state_dict(ckpt.sub_tensors("model"))
        if ckpt.optimizer:
            optimizer.load_state_dict(ckpt.optimizer)
        start_step = ckpt.step
        generator.manual_seed(seed + 1 + start_step)
        logger.info(f"学習再開: {resume_from} (step {start_step})")
    scale = float(model.latent_scale)

    running, count = 0.0, 0
    last_loss = float("nan")
    step = start_step
    for step in tqdm(range(start_step, cfg.steps), disable=not progress, desc="diffusion"):
        model.train()
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=generator)
        noise = torch.randn(z_mean[idx].shape, generator=generator).to(device)
        z0 = (z_mean[idx] + z_std[idx] * noise) * scale
        t = torch.randint(1, sched.T + 1, (idx.shape[0],), generator=generator)
        eps = torch.randn(z0.shape, generator=generator).to(device)
        z_t = q_sample(z0, t, eps, sched)

        eps_hat = model(
            z_t,
            t.to(device),
            mask=mask_channels[idx] if cfg.uses_mask else None,
            background=images[idx] if cfg.uses_background else None,
        )
        loss = diffusion_loss(eps, eps_hat)
        if not torch.isfinite(loss):
            raise DivergenceError("損失が発散しました", f"step={step}, loss={loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        last_loss = loss.item()
        running += last_loss
        count += 1
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            mean_loss = running / count
            log.append(step=step + 1, loss=mean_loss)
            logger.info(f"拡散ステップ {step + 1}/{cfg.steps}: loss={mean_loss:.5f}", extra={"step": step + 1, "loss": mean_loss})
            running, count = 0.0, 0
            if mean_loss < cfg.target_loss:
                logger.info(f"目標損失 {cfg.target_loss} に到達したため終了")
                step += 1
                break
    else:
        step = cfg.steps

    log.flush()
    save_checkpoint(
        ckpt_path,
        CHECKPOINT_KIND,
        cfg.model_dump(mode="json"),
        prefixed("model", model.state_dict()),
        step=step,
        losses={"loss": last_loss},
        extra={
            "latent_channels": latent_channels,
            "f": f,
            "latent_hw": list(latent_hw),
            "latent_scale": scale,
            "schedule": sched.to_dict(),
            "ae_checkpoint": os.path.abspath(ae_path) if ae_path else "",
        },
        optimizer=optimizer.state_dict(),
    )
    return ckpt_path
