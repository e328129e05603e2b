"""
データ拡張実験
学習セットの構成を変えてセグメンターを学習し、常に同じ実テストセットで評価する
"""

import json
import logging
import math
import os
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..dataio.types import CLASS_NAMES, Dataset, SegMask
from ..models.segmenter import SegmenterConfig
from ..utils.errors import ParameterError, PlanError
from ..utils.seeding import derive_seed
from .segmenter import evaluate_segmenter, train_segmenter

logger = logging.getLogger(__name__)

# (masks, mask_source, seed) -> 画像-マスク組
PairGenerator = Callable[[Sequence[SegMask], str, int], Dataset]
# (n, class_filter, seed) -> マスク
MaskSynthesizer = Callable[[int, str, int], List[SegMask]]

ClassFilter = Literal["compact", "extended", "both"]


class AugmentationPlan(BaseModel):
    """実験計画"""

    model_config = ConfigDict(extra="forbid")

    mode: Optional[Literal["synthetic-masks", "real-masks", "all"]] = Field(
        default=None, description="Noneならベースラインのみ"
    )
    class_filters: List[ClassFilter] = Field(default_factory=lambda: ["compact", "extended", "both"])
    counts: Dict[str, int] = Field(default_factory=dict, description="クラスフィルタごとの合成マスク数")
    n_synthetic: int = Field(default=200, ge=0, description="countsにないフィルタの合成マスク数")
    keep_ratio: float = Field(default=0.7, gt=0, lt=1)
    extended_bias: float = Field(default=0.8, gt=0, lt=1, description="拡散源を含む組を除去側に寄せる重み")
    seed: int = 0

    @field_validator("counts")
    @classmethod
    def _non_negative(cls, value: Dict[str, int]) -> Dict[str, int]:
        for key, count in value.items():
            if key not in ("compact", "extended", "both"):
                raise ValueError(f"未知のクラスフィルタです: {key}")
            if count < 0:
                raise ValueError(f"合成マスク数は0以上である必要があります: {key}={count}")
        return value

    @property
    def uses_real_masks(self) -> bool:
        return self.mode in ("real-masks", "all")

    @property
    def uses_synthetic_masks(self) -> bool:
        return self.mode in ("synthetic-masks", "all")

    def count_for(self, class_filter: str) -> int:
        return self.counts.get(class_filter, self.n_synthetic)


class ExperimentRow(BaseModel):
    name: str
    composition: str
    n_real: int
    n_synthetic: int
    iou_all: float
    iou_per_class: Dict[str, float] = Field(default_factory=dict)


class ExperimentReport(BaseModel):
    """構成ごとのIoU表"""

    rows: List[ExperimentRow] = Field(default_factory=list)
    n_test: int = 0
    plan: Optional[AugmentationPlan] = None

    def to_dataframe(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = {
                "configuration": row.name,
                "composition": row.composition,
                "n_real": row.n_real,
                "n_synthetic": row.n_synthetic,
                "iou_all": row.iou_all,
            }
            for name in CLASS_NAMES:
                record[f"iou_{name}"] = row.iou_per_class.get(name, float("nan"))
            records.append(record)
        return pd.DataFrame(records)

    def to_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_dataframe().to_csv(path, index=False)
        return path

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.model_dump(mode="json"), indent=2, ensure_ascii=False, sort_keys=True)
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
        return text


def reduce_train_set(
    ds: Dataset,
    keep_ratio: float = 0.7,
    extended_bias: float = 0.8,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    学習セットから (1 − keep_ratio) を除去する

    拡散源 (extended) を含む組ほど除去されやすい。

    Returns:
        Tuple[np.ndarray, np.ndarray]: (残すインデックス, 除去したインデックス)
    """
    n = len(ds)
    if n < 2:
        raise ParameterError("縮小するには2件以上必要です", str(n))
    if not (0.0 < keep_ratio < 1.0) or not (0.0 < extended_bias < 1.0):
        raise ParameterError("keep_ratioとextended_biasは(0,1)の範囲である必要があります")

    n_keep = max(1, int(math.floor(keep_ratio * n + 1e-9)))
    n_remove = n - n_keep
    extended_code = CLASS_NAMES.index("extended") + 1
    has_extended = np.array([bool((item.mask.labels == extended_code).any()) for item in ds])
    weights = np.where(has_extended, extended_bias, 1.0 - extended_bias)
    rng = np.random.default_rng(seed)
    removed = np.sort(rng.choice(n, size=n_remove, replace=False, p=weights / weights.sum()))
    kept = np.setdiff1d(np.arange(n), removed)
    if np.intersect1d(kept, removed).size:
        raise PlanError("残すデータと除去したデータが重複しています")
    return kept, removed


def _merge(*datasets: Dataset) -> Dataset:
    return Dataset([item for ds in datasets for item in ds])


def _class_table(table: Dict[int, float]) -> Dict[str, float]:
    return {CLASS_NAMES[k - 1]: v for k, v in table.items() if 1 <= k <= len(CLASS_NAMES)}


def run_augmentation_experiment(
    plan: AugmentationPlan,
    train_ds: Dataset,
    test_ds: Dataset,
    out_dir: str,
    segmenter_cfg: Optional[SegmenterConfig] = None,
    pair_generator: Optional[PairGenerator] = None,
    mask_synthesizer: Optional[MaskSynthesizer] = None,
    device: str = "cpu",
) -> ExperimentReport:
    """
    計画に従って構成ごとにセグメンターを学習し、実テストセットでIoUを測る

    行: SC (全学習データ)、real-masks で SC_R / SC_R+SC_A / SC_S、
    synthetic-masks で SC + 合成組 (クラスフィルタごと)。

    Args:
        plan (AugmentationPlan): 実験計画
        train_ds (Dataset): 実学習データ (SC)
        test_ds (Dataset): 実テストデータ
        out_dir (str): 出力先 (行ごとにセグメンターを保存)
        segmenter_cfg (Optional[SegmenterConfig]): セグメンター設定
        pair_generator: マスクから画像-マスク組を作る関数
        mask_synthesizer: マスクを合成する関数

    Returns:
        ExperimentReport: 構成ごとのIoU
    """
    segmenter_cfg = segmenter_cfg or SegmenterConfig()
    if len(test_ds) == 0:
        raise PlanError("テストデータが空です")
    if plan.mode is not None and pair_generator is None:
        raise PlanError("拡張には画像生成器が必要です", str(plan.mode))
    if plan.uses_synthetic_masks and mask_synthesizer is None:
        raise PlanError("合成マスクモードにはマスク生成器が必要です")

    report = ExperimentReport(n_test=len(test_ds), plan=plan)
    train_ids = {item.item_id for item in train_ds}
    if train_ids & {item.item_id for item in test_ds}:
        raise PlanError("学習データとテストデータが重複しています")

    def run_row(name: str, composition: str, ds: Dataset, n_real: int, n_synthetic: int) -> None:
        row_seed = derive_seed(plan.seed, f"segmenter:{name}")
        path = train_segmenter(ds, segmenter_cfg, os.path.join(out_dir, "segmenters"), row_seed, device=device,
                               name=name.replace("+", "_plus_").replace(" ", "_"))
        table, value = evaluate_segmenter(path, test_ds)
        report.rows.append(ExperimentRow(
            name=name,
            composition=composition,
            n_real=n_real,
            n_synthetic=n_synthetic,
            iou_all=value,
            iou_per_class=_class_table(table),
        ))
        logger.info(f"{name}: IoU={value:.4f}", extra={"row": name, "n_real": n_real, "n_synthetic": n_synthetic})

    run_row("SC", "real", train_ds, len(train_ds), 0)

    if plan.uses_real_masks:
        kept, removed = reduce_train_set(train_ds, plan.keep_ratio, plan.extended_bias, derive_seed(plan.seed, "reduce"))
        reduced = train_ds.subset(kept)
        held_out = train_ds.subset(removed)
        if {item.item_id for item in reduced} & {item.item_id for item in held_out}:
            raise PlanError("SC_RとSC_Aの元データが重複しています")
        run_row("SC_R", f"real {len(kept)}", reduced, len(reduced), 0)

        augmented = pair_generator(held_out.masks, "real", derive_seed(plan.seed, "SC_A"))
        run_row("SC_R+SC_A", f"real {len(kept)} + synthetic from {len(removed)} real masks",
                _merge(reduced, augmented), len(reduced), len(augmented))

        synthetic = pair_generator(train_ds.masks, "real", derive_seed(plan.seed, "SC_S"))
        run_row("SC_S", f"synthetic from {len(train_ds)} real masks", synthetic, 0, len(synthetic))

    if plan.uses_synthetic_masks:
        for class_filter in plan.class_filters:
            count = plan.count_for(class_filter)
            if count == 0:
                continue
            masks = mask_synthesizer(count, class_filter, derive_seed(plan.seed, f"masks:{class_filter}"))
            pairs = pair_generator(masks, "synthetic", derive_seed(plan.seed, f"pairs:{class_filter}"))
            run_row(f"SC+{class_filter}", f"real {len(train_ds)} + synthetic {class_filter} {len(pairs)}",
                    _merge(train_ds, pairs), len(train_ds), len(pairs))

    return report
