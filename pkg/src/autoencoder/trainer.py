"""
オートエンコーダーの学習
"""

import logging
import math
import os
from typing import Optional

import torch
from tqdm import tqdm

from ..dataio.types import Dataset
from ..utils.checkpoint import LossLog, load_checkpoint, prefixed, save_checkpoint
from ..utils.errors import DataError, DivergenceError, ShapeError
from ..utils.seeding import seeded_build, torch_generator
from .model import AutoencoderConfig, AutoencoderKL
from .ops import kl_to_standard_normal

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "autoencoder"
LOSS_COLUMNS = ["epoch", "L_rec", "L_reg", "total"]


def load_autoencoder(path: str, device: str = "cpu") -> AutoencoderKL:
    """チェックポイントからオートエンコーダーを復元"""
    ckpt = load_checkpoint(path, CHECKPOINT_KIND)
    model = AutoencoderKL(AutoencoderConfig(**ckpt.config))
    model.load_state_dict(ckpt.sub_tensors("model"))
    return model.to(device).eval()


def train_autoencoder(
    ds: Dataset,
    cfg: AutoencoderConfig,
    out_dir: str,
    seed: int = 0,
    resume_from: Optional[str] = None,
    device: str = "cpu",
    progress: bool = False,
) -> str:
    """
    再構成損失 (L1) + w_kl·KL で学習

    Args:
        ds (Dataset): 前処理済みの学習データ
        cfg (AutoencoderConfig): 設定
        out_dir (str): チェックポイントと損失ログの出力先
        seed (int): 初期化とミニバッチのシード
        resume_from (Optional[str]): 再開するチェックポイント
        device (str): 計算デバイス
        progress (bool): 進捗バーを表示するか

    Returns:
        str: チェックポイントのパス
    """
    if len(ds) == 0:
        raise DataError("学習データが空です")
    images, _ = ds.to_tensors()
    n, _, height, width = images.shape
    if height % cfg.f or width % cfg.f:
        raise ShapeError(f"画像サイズが圧縮率f={cfg.f}で割り切れません", f"{height}x{width}")

    model = seeded_build(lambda: AutoencoderKL(cfg), seed).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    start_epoch = 0
    generator = torch_generator(seed + 1)

    ckpt_path = os.path.join(out_dir, "autoencoder.pt")
    log = LossLog(os.path.join(out_dir, "autoencoder_loss.csv"), LOSS_COLUMNS, append=resume_from is not None)
    if resume_from:
        ckpt = load_checkpoint(resume_from, CHECKPOINT_KIND)
        model.load_state_dict(ckpt.sub_tensors("model"))
        if ckpt.optimizer:
            optimizer.load_state_dict(ckpt.optimizer)
        start_epoch = ckpt.epoch
        generator.manual_seed(seed + 1 + start_epoch)
        logger.info(f"学習再開: {resume_from} (epoch {start_epoch})")

    losses = {}
    epoch = start_epoch
    for epoch in tqdm(range(start_epoch, cfg.epochs), disable=not progress, desc="autoencoder"):
        model.train()
        perm = torch.randperm(n, generator=generator)
        sums = {"L_rec": 0.0, "L_reg": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            x = images[perm[start:start + cfg.batch_size]].to(device)
            mean, log_variance = model.encode_moments(x)
            noise = torch.randn(mean.shape, generator=generator).to(device)
            z = mean + torch.exp(0.5 * log_variance) * noise
            # 学習中はクランプ前の出力で損失を取る (勾配が消えないように)
            x_hat = model.decode_tensor(z, clamp=False)
            l_rec = torch.mean(torch.abs(x - x_hat))
            l_reg = kl_to_standard_normal(mean, log_variance)
            total = l_rec + cfg.w_kl * l_reg
            if not torch.isfinite(total):
                raise DivergenceError(
                    "損失が発散しました",
                    f"epoch={epoch}, L_rec={l_rec.item()}, L_reg={l_reg.item()}",
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums["L_rec"] += l_rec.item()
            sums["L_reg"] += l_reg.item()
            sums["total"] += total.item()
            batches += 1

        losses = {k: v / batches for k, v in sums.items()}
        log.append(epoch=epoch + 1, **losses)
        logger.info(
            f"AEエポック {epoch + 1}/{cfg.epochs}: L_rec={losses['L_rec']:.5f}",
            extra={"epoch": epoch + 1, **losses},
        )
        if losses["L_rec"] < cfg.target_rec:
            logger.info(f"目標L_rec {cfg.target_rec} に到達したため終了")
            epoch += 1
            break
    else:
        epoch = cfg.epochs

    log.flush()
    if losses and not all(math.isfinite(v) for v in losses.values()):
        raise DivergenceError("最終損失が非有限です", str(losses))
    save_checkpoint(
        ckpt_path,
        CHECKPOINT_KIND,
        cfg.model_dump(mode="json"),
        prefixed("model", model.state_dict()),
        epoch=epoch,
        losses=losses,
        optimizer=optimizer.state_dict(),
    )
    return ckpt_path
