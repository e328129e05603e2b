"""
コマンドラインの実行部
サブコマンドを各モジュールのパイプラインに対応付け、例外を終了コードに変換する
"""

import argparse
import json
import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from config.settings import Config
from ..augment.experiment import AugmentationPlan, run_augmentation_experiment
from ..augment.mask_ddpm import instance_statistics, synthesize_masks, train_mask_ddpm
from ..augment.pairs import generate_pairs
from ..augment.segmenter import train_segmenter
from ..autoencoder.trainer import train_autoencoder
from ..compositor.compose import compose_map
from ..conditioning.condition import load_condition_specs
from ..dataio.annotations import load_annotation
from ..dataio.dataset import dataset_statistics, image_rms, split_dataset
from ..dataio.dataset_store import DatasetStore
from ..dataio.fits_io import read_fits_cutout, write_fits_cutout
from ..dataio.preprocessing import default_scale, preprocess, preprocess_dataset
from ..dataio.toy_generator import NOISE_SIGMA, correlated_noise, generate_toy_dataset
from ..dataio.types import Cutout, Dataset, Image2D, SegMask
from ..diffusion.sampling import sample_images
from ..diffusion.schedule import make_schedule
from ..diffusion.trainer import load_denoiser, train_diffusion
from ..metrics.features import train_feature_extractor
from ..metrics.report import evaluate
from ..utils.errors import (
    EXIT_RUNTIME,
    EXIT_USAGE,
    EXIT_VALIDATION,
    DependencyError,
    ParameterError,
    RadiffError,
    UsageError,
)
from ..utils.logging_utils import setup_logging
from ..utils.seeding import derive_seed, seed_everything
from .configuration import RunConfig, resolve_run_config
from .plots import emit_plots

logger = logging.getLogger(__name__)

COMMANDS = (
    "gen-toy-data",
    "train-ae",
    "train-diffusion",
    "train-mask-ddpm",
    "train-segmenter",
    "train-extractor",
    "sample",
    "evaluate",
    "augment-experiment",
    "compose-map",
)


class _ArgumentParser(argparse.ArgumentParser):
    """エラー時に終了せず UsageError を送出する"""

    def error(self, message: str):
        raise UsageError("引数が不正です", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="radiff", description="RADiff - 電波天文画像の条件付き潜在拡散パイプライン")
    parser.add_argument("command", choices=COMMANDS, help="実行するサブコマンド")
    parser.add_argument("--config", help="設定ファイル (KEY=VALUE形式、include対応)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="設定の上書き (複数指定可)")
    parser.add_argument("--seed", type=int, help="トップレベルのシード")
    parser.add_argument("--out", help="出力ディレクトリ")
    parser.add_argument("--n-crops", dest="n_crops", type=int, help="compose-map で生成するクロップ数")
    parser.add_argument("--log-level", default=None, help="ログレベル (既定は RADIFF_LOG_LEVEL)")
    parser.add_argument("--log-file", default=None, help="ログの出力先ファイル")
    return parser


# ---------------------------------------------------------------------------
# 共通処理
# ---------------------------------------------------------------------------

def resolve_checkpoint(cfg: RunConfig, explicit: Optional[str], kind: str, required: bool = True) -> Optional[str]:
    """
    チェックポイントの場所を決める (明示指定 > 出力ディレクトリ > RADIFF_HOME)
    """
    candidates = [explicit] if explicit else [
        os.path.join(cfg.out_dir, Config.CHECKPOINTS[kind]),
        Config.get_checkpoint_path(kind),
    ]
    for path in candidates:
        if path and os.path.exists(path):
            return path
    if required:
        raise DependencyError(f"{kind} のチェックポイントが見つかりません", ", ".join(p for p in candidates if p))
    return None


def load_splits(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """データディレクトリを読み込み、前処理して学習/テストに分割"""
    raw = DatasetStore(cfg.data_dir).load_dataset()
    ds = preprocess_dataset(raw, cfg.tanh_scale, cfg.normalize)
    return split_dataset(ds, cfg.split_ratio, derive_seed(cfg.seed, "split"))


def _write_json(path: str, payload: Dict) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
    return path


def _plots(cfg: RunConfig, report, sub_dir: str = "plots") -> List[str]:
    if not cfg.plots:
        return []
    return emit_plots(report, os.path.join(cfg.out_dir, sub_dir), cfg.image_format)


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------

def cmd_gen_toy_data(cfg: RunConfig) -> None:
    """トイデータセットと背景マップを作る"""
    seed = derive_seed(cfg.seed, "dataio")
    ds = generate_toy_dataset(cfg.n_items, cfg.image_size, cfg.class_mix, seed)
    DatasetStore(cfg.data_dir).save_dataset(ds)

    if cfg.map_size > 0:
        rng = np.random.default_rng(derive_seed(cfg.seed, "background-map"))
        noise = correlated_noise((cfg.map_size, cfg.map_size), NOISE_SIGMA, rng)
        write_fits_cutout(os.path.join(cfg.data_dir, "background_map.fits"),
                          Image2D(noise.astype(np.float32), provenance="toy-background-map"))

    stats = dataset_statistics(ds)
    stats.to_csv(os.path.join(cfg.out_dir, "dataset_statistics.csv"), index=False)
    rms = pd.DataFrame({"rms": image_rms(ds)})
    rms.to_csv(os.path.join(cfg.out_dir, "image_rms.csv"), index=False)
    _plots(cfg, stats)
    _plots(cfg, rms)
    logger.info(f"トイデータ生成完了: {len(ds)}件", extra={"data_dir": cfg.data_dir})


def cmd_train_ae(cfg: RunConfig) -> None:
    train, _ = load_splits(cfg)
    train_autoencoder(train, cfg.autoencoder, cfg.out_dir, derive_seed(cfg.seed, "autoencoder"),
                      resume_from=cfg.resume_from, device=cfg.device, progress=cfg.progress)


def cmd_train_diffusion(cfg: RunConfig) -> None:
    train, _ = load_splits(cfg)
    ae_path = resolve_checkpoint(cfg, cfg.ae_checkpoint, "autoencoder")
    sched = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    train_diffusion(train, ae_path, sched, cfg.diffusion, cfg.out_dir, derive_seed(cfg.seed, "diffusion"),
                    resume_from=cfg.resume_from, device=cfg.device, progress=cfg.progress)


def cmd_train_mask_ddpm(cfg: RunConfig) -> None:
    train, _ = load_splits(cfg)
    train_mask_ddpm(train.masks, cfg.mask_ddpm, cfg.out_dir, derive_seed(cfg.seed, "mask_ddpm"),
                    device=cfg.device, progress=cfg.progress)


def cmd_train_segmenter(cfg: RunConfig) -> None:
    train, test = load_splits(cfg)
    train_segmenter(train, cfg.segmenter, cfg.out_dir, derive_seed(cfg.seed, "segmenter"),
                    val_ds=test, device=cfg.device, progress=cfg.progress)


def cmd_train_extractor(cfg: RunConfig) -> None:
    train, _ = load_splits(cfg)
    train_feature_extractor(train, cfg.extractor, cfg.out_dir, derive_seed(cfg.seed, "extractor"),
                            device=cfg.device, progress=cfg.progress)


def _sample_conditions(cfg: RunConfig, uses_mask: bool, uses_background: bool):
    """(マスク, 背景, シード, 元アイテムID) のリストを作る"""
    if cfg.conditions:
        rows = []
        for spec in load_condition_specs(cfg.conditions):
            mask = load_annotation(spec.mask_path)
            background = None
            if spec.background_path:
                raw = read_fits_cutout(spec.background_path)
                background = preprocess(raw, default_scale(raw))
            rows.append((mask, background, spec.seed, os.path.splitext(os.path.basename(spec.mask_path))[0]))
        return rows

    seeds = [derive_seed(cfg.seed, f"sample-{i}") for i in range(cfg.n_samples)]
    if not uses_mask and not uses_background:
        return [(None, None, s, None) for s in seeds]
    _, test = load_splits(cfg)
    if len(test) == 0:
        raise ParameterError("条件に使うテストデータがありません", cfg.data_dir)
    items = [test[i % len(test)] for i in range(cfg.n_samples)]
    return [(item.mask, item.image, s, item.item_id) for item, s in zip(items, seeds)]


def cmd_sample(cfg: RunConfig) -> None:
    """学習済みモデルから生成し、FITSと条件を記録したJSONを保存"""
    diffusion_path = resolve_checkpoint(cfg, cfg.diffusion_checkpoint, "diffusion")
    net, sched, recorded_ae = load_denoiser(diffusion_path, cfg.device)
    ae_path = cfg.ae_checkpoint or recorded_ae
    if not ae_path or not os.path.exists(ae_path):
        ae_path = resolve_checkpoint(cfg, None, "autoencoder")

    rows = _sample_conditions(cfg, net.cfg.uses_mask, net.cfg.uses_background)
    seeds = [row[2] for row in rows]
    masks = [row[0] for row in rows] if net.cfg.uses_mask else None
    backgrounds = [row[1] for row in rows] if net.cfg.uses_background else None
    if backgrounds is not None and any(b is None for b in backgrounds):
        raise ParameterError("背景条件付きモデルには全ての条件に背景が必要です")
    if masks is not None and any(m is None for m in masks):
        raise ParameterError("マスク条件付きモデルには全ての条件にマスクが必要です")

    images = sample_images(net, sched, ae_path, seeds, masks=masks, backgrounds=backgrounds,
                           batch_size=cfg.sample_batch_size)

    schedule = sched.to_dict()
    items = []
    for i, (image, row) in enumerate(zip(images, rows)):
        mask, background, seed, source_item = row
        meta = {
            "item_id": f"sample_{i:05d}",
            "seed": seed,
            "mode": net.cfg.mode,
            "schedule": schedule,
            "source_item": source_item,
            "mask_source": "condition" if mask is not None and net.cfg.uses_mask else None,
            "background_source": background.provenance if background is not None and net.cfg.uses_background else None,
        }
        items.append(Cutout(image, mask if mask is not None else SegMask.empty(image.shape), meta))

    sample_dir = os.path.join(cfg.out_dir, "samples")
    store = DatasetStore(sample_dir)
    store.save_dataset(Dataset(items))
    for item in items:
        _write_json(os.path.join(sample_dir, f"{item.item_id}_sample.json"), item.meta)
    _write_json(os.path.join(cfg.out_dir, "samples.json"), {
        "diffusion_checkpoint": os.path.abspath(diffusion_path),
        "ae_checkpoint": os.path.abspath(ae_path),
        "samples": [item.meta for item in items],
    })
    logger.info(f"サンプル生成完了: {len(items)}枚", extra={"out_dir": sample_dir})


def _pair_for_evaluation(real: Dataset, generated: Dataset) -> Tuple[List[Image2D], List[Image2D], List[SegMask]]:
    """生成画像の source_item (なければ item_id) で実画像と対応付ける"""
    by_id = {item.item_id: item for item in real}
    real_images, generated_images, masks = [], [], []
    for item in generated:
        key = item.meta.get("source_item") or item.item_id
        if key in by_id:
            real_images.append(by_id[key].image)
            generated_images.append(item.image)
            masks.append(item.mask)
    return real_images, generated_images, masks


def cmd_evaluate(cfg: RunConfig) -> None:
    """生成画像を実画像と比較してFID・SSIM・セグメンテーションスコアを出す"""
    generated_dir = cfg.generated_dir or os.path.join(cfg.out_dir, "samples")
    generated = preprocess_dataset(DatasetStore(generated_dir).load_dataset(), cfg.tanh_scale, cfg.normalize)
    real = preprocess_dataset(DatasetStore(cfg.data_dir).load_dataset(), cfg.tanh_scale, cfg.normalize)

    real_images, generated_images, masks = _pair_for_evaluation(real, generated)
    if not generated_images:
        logger.warning("実画像と対応する生成画像がないため、全件で非対応の評価を行います")
        real_images, generated_images, masks = real.images, generated.images, generated.masks

    extractor = resolve_checkpoint(cfg, cfg.extractor_checkpoint, "extractor", required=False)
    segmenter = resolve_checkpoint(cfg, cfg.segmenter_checkpoint, "segmenter", required=False)
    report = evaluate(real_images, generated_images, extractor=extractor, segmenter=segmenter, gt_masks=masks)
    report.to_json(os.path.join(cfg.out_dir, "metrics.json"))
    _plots(cfg, report)


def _load_plan(cfg: RunConfig) -> AugmentationPlan:
    plan = cfg.augmentation
    if cfg.plan:
        with open(cfg.plan, "r", encoding="utf-8") as f:
            plan = AugmentationPlan.model_validate_json(f.read())
    return plan.model_copy(update={"seed": derive_seed(cfg.seed, "augment")})


def cmd_augment_experiment(cfg: RunConfig) -> None:
    """拡張構成ごとにセグメンターを学習し、IoU表を出力"""
    plan = _load_plan(cfg)
    train, test = load_splits(cfg)

    pair_generator = None
    if plan.mode is not None:
        diffusion_path = resolve_checkpoint(cfg, cfg.diffusion_checkpoint, "diffusion")
        pool = train.images

        def pair_generator(masks, source, seed):
            return generate_pairs(masks, diffusion_path, pool, seed, ae_checkpoint=cfg.ae_checkpoint,
                                  mask_source=source, batch_size=cfg.sample_batch_size)

    mask_synthesizer = None
    if plan.uses_synthetic_masks:
        mask_path = resolve_checkpoint(cfg, cfg.mask_ddpm_checkpoint, "mask_ddpm")
        generated_masks: List[SegMask] = []

        def mask_synthesizer(n, class_filter, seed):
            masks = synthesize_masks(mask_path, n, class_filter, seed, batch_size=cfg.sample_batch_size)
            generated_masks.extend(masks)
            return masks

    report = run_augmentation_experiment(plan, train, test, cfg.out_dir, cfg.segmenter, pair_generator,
                                         mask_synthesizer, device=cfg.device)
    report.to_json(os.path.join(cfg.out_dir, "experiment.json"))
    report.to_csv(os.path.join(cfg.out_dir, "experiment.csv"))
    if plan.uses_synthetic_masks and generated_masks:
        instance_statistics(generated_masks).to_csv(os.path.join(cfg.out_dir, "synthetic_mask_statistics.csv"),
                                                    index=False)
    _plots(cfg, report)


def cmd_compose_map(cfg: RunConfig) -> None:
    """背景マップに生成天体を注入してカタログとともに保存"""
    bg_path = cfg.background_map or os.path.join(cfg.data_dir, "background_map.fits")
    if not os.path.exists(bg_path):
        raise DependencyError("背景マップが見つかりません", bg_path)

    diffusion_path = None
    mask_source = []
    if cfg.n_crops > 0:
        diffusion_path = resolve_checkpoint(cfg, cfg.diffusion_checkpoint, "diffusion")
        mask_source = resolve_checkpoint(cfg, cfg.mask_ddpm_checkpoint, "mask_ddpm", required=False)
        if mask_source is None:
            train, _ = load_splits(cfg)
            mask_source = train.masks
    compose_map(bg_path, diffusion_path, mask_source, cfg.n_crops, cfg.flux, cfg.overlap,
                derive_seed(cfg.seed, "compositor"), cfg.out_dir)


HANDLERS: Dict[str, Callable[[RunConfig], None]] = {
    "gen-toy-data": cmd_gen_toy_data,
    "train-ae": cmd_train_ae,
    "train-diffusion": cmd_train_diffusion,
    "train-mask-ddpm": cmd_train_mask_ddpm,
    "train-segmenter": cmd_train_segmenter,
    "train-extractor": cmd_train_extractor,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "augment-experiment": cmd_augment_experiment,
    "compose-map": cmd_compose_map,
}


def run(argv: Sequence[str]) -> int:
    """
    CLIのエントリーポイント

    Args:
        argv (Sequence[str]): コマンドライン引数 (プログラム名を除く)

    Returns:
        int: 終了コード (0: 成功, 1: 実行時エラー, 2: 使い方の誤り, 3: 検証エラー)
    """
    load_dotenv(Config.get_env_path())
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return 0 if e.code in (0, None) else EXIT_USAGE
    except UsageError as e:
        parser.print_usage()
        logger.error(str(e), extra={"category": e.category})
        return e.exit_code

    level = args.log_level or os.environ.get("RADIFF_LOG_LEVEL", Config.get_setting("log_level"))
    setup_logging(level, args.log_file)

    try:
        overrides = list(args.overrides)
        if args.n_crops is not None:
            overrides.append(f"n_crops={args.n_crops}")
        cfg = resolve_run_config(args.config, overrides, args.seed, args.out)
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "resolved_config.json"), "w", encoding="utf-8") as f:
            f.write(cfg.to_json())
        seed_everything(derive_seed(cfg.seed, args.command))

        logger.info(f"コマンド開始: {args.command}", extra={"seed": cfg.seed, "out_dir": cfg.out_dir})
        HANDLERS[args.command](cfg)
        logger.info(f"コマンド完了: {args.command}")
        return 0
    except ValidationError as e:
        logger.error(f"設定の検証に失敗しました: {e}", extra={"category": "validation"})
        return EXIT_VALIDATION
    except RadiffError as e:
        logger.error(str(e), extra={"category": e.category})
        return e.exit_code
    except Exception as e:
        logger.exception(f"予期しないエラー: {e}", extra={"category": "runtime"})
        return EXIT_RUNTIME
