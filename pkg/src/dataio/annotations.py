"""
アノテーション (JSONサイドカー) の読み書き
{"objects": [{"class": "compact|extended|spurious", "mask_file": "<path>"}]}
"""

import json
import logging
import os
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from config.settings import Config
from ..utils.errors import ResolutionError, SchemaError
from .fits_io import read_fits_cutout, write_fits_cutout
from .types import EIGHT_CONNECTIVITY, Image2D, ObjectRecord, SegMask

logger = logging.getLogger(__name__)


def _read_object_mask(json_dir: str, mask_file: str) -> np.ndarray:
    path = mask_file if os.path.isabs(mask_file) else os.path.join(json_dir, mask_file)
    if not os.path.exists(path):
        raise ResolutionError("マスクファイルが見つかりません", path)
    return read_fits_cutout(path).pixels > 0.5


def load_annotation(json_path: str, shape: Optional[Tuple[int, int]] = None) -> SegMask:
    """
    天体ごとのバイナリマスクを1枚の整数マスクに統合

    重なったピクセルはファイル順で後の天体が優先される。

    Args:
        json_path (str): アノテーションJSONのパス
        shape (Optional[Tuple[int, int]]): マスク形状 (JSONに"shape"がない場合に使用)

    Returns:
        SegMask: 統合されたマスク
    """
    try:
        with open(json_path, "r", encoding="utf-8") as f:
            annotation = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError("アノテーションJSONが不正です", f"{json_path}: {e}") from e

    objects = annotation.get("objects")
    if not isinstance(objects, list):
        raise SchemaError("'objects' リストがありません", json_path)

    json_dir = os.path.dirname(os.path.abspath(json_path))
    footprints: List[Tuple[int, np.ndarray]] = []
    for obj in objects:
        if not isinstance(obj, dict) or "class" not in obj or "mask_file" not in obj:
            raise SchemaError("天体エントリには 'class' と 'mask_file' が必要です", json_path)
        name = obj["class"]
        if name not in Config.CLASS_CODES or name == "background":
            raise SchemaError(f"未知のクラスラベル: {name}", json_path)
        footprints.append((Config.CLASS_CODES[name], _read_object_mask(json_dir, obj["mask_file"])))

    if shape is None:
        if "shape" in annotation:
            shape = tuple(int(s) for s in annotation["shape"])
        elif footprints:
            shape = footprints[0][1].shape
        else:
            raise SchemaError("天体がない場合はマスク形状の指定が必要です", json_path)

    labels = np.zeros(shape, dtype=np.int64)
    for code, footprint in footprints:
        if footprint.shape != tuple(shape):
            raise SchemaError("マスクファイルの形状が一致しません", f"{footprint.shape} != {shape}")
        labels[footprint] = code

    return SegMask(labels, num_classes=len(Config.CLASS_CODES) - 1)


def write_annotation(json_path: str, objects: List[ObjectRecord], shape: Tuple[int, int]) -> str:
    """
    天体ごとのマスクFITSとアノテーションJSONを書き出す

    Args:
        json_path (str): 出力するJSONのパス
        objects (List[ObjectRecord]): 天体リスト (ファイル順 = 重なりの優先順)
        shape (Tuple[int, int]): マスク形状

    Returns:
        str: 書き出したJSONのパス
    """
    json_dir = os.path.dirname(os.path.abspath(json_path))
    stem = os.path.splitext(os.path.basename(json_path))[0]
    entries = []
    for i, obj in enumerate(objects):
        mask_file = f"{stem}_obj{i:02d}.fits"
        write_fits_cutout(
            os.path.join(json_dir, mask_file),
            Image2D(obj.footprint.astype(np.float32), provenance=f"{stem}:{i}"),
        )
        entries.append({"class": obj.class_name, "mask_file": mask_file})

    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"objects": entries, "shape": list(shape)}, f, ensure_ascii=False, indent=2)
    return json_path


def objects_from_mask(mask: SegMask) -> List[ObjectRecord]:
    """整数マスクの連結成分 (8近傍) を天体レコードに分解"""
    objects = []
    for code in range(1, mask.num_classes + 1):
        components, n = ndimage.label(mask.labels == code, structure=EIGHT_CONNECTIVITY)
        for index in range(1, n + 1):
            objects.append(ObjectRecord(Config.class_name(code), components == index))
    return objects
