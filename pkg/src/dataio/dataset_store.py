"""
データセット保存管理モジュール
カットアウトの保存、読み込み、一覧表示、統計などの機能を提供
"""

import json
import logging
import os
from typing import Dict, List

from .annotations import load_annotation, objects_from_mask, write_annotation
from .dataset import dataset_statistics
from .fits_io import read_fits_cutout, write_fits_cutout
from .types import Cutout, Dataset
from ..utils.errors import LoadError

logger = logging.getLogger(__name__)


class DatasetStore:
    """FITS + JSONペアのディレクトリを管理するクラス"""

    def __init__(self, storage_dir: str):
        """
        初期化

        Args:
            storage_dir (str): データセットディレクトリ
        """
        self.storage_dir = storage_dir
        self.manifest_file = os.path.join(storage_dir, "manifest.json")

    def _ensure_storage_dir(self):
        """保存ディレクトリが存在することを確認"""
        os.makedirs(self.storage_dir, exist_ok=True)

    def _load_manifest(self) -> Dict:
        """
        マニフェストファイルを読み込み

        Returns:
            Dict: マニフェスト辞書
        """
        if not os.path.exists(self.manifest_file):
            raise LoadError("マニフェストが見つかりません", self.manifest_file)
        with open(self.manifest_file, "r", encoding="utf-8") as f:
            return json.load(f)

    def save_dataset(self, ds: Dataset) -> str:
        """
        データセットを保存

        Args:
            ds (Dataset): 保存するデータセット

        Returns:
            str: マニフェストのパス
        """
        self._ensure_storage_dir()
        entries = []
        for item in ds.items:
            stem = item.item_id
            image_file = f"{stem}.fits"
            annotation_file = f"{stem}.json"
            write_fits_cutout(os.path.join(self.storage_dir, image_file), item.image)
            objects = item.objects or objects_from_mask(item.mask)
            write_annotation(os.path.join(self.storage_dir, annotation_file), objects, item.image.shape)
            entries.append({
                "item_id": stem,
                "image_file": image_file,
                "annotation_file": annotation_file,
                "preprocessed": bool(item.image.preprocessed),
                "meta": {k: v for k, v in item.meta.items() if k != "item_id"},
            })

        manifest = {"items": entries, "class_counts": ds.class_counts}
        with open(self.manifest_file, "w", encoding="utf-8") as f:
            json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)

        logger.info(f"データセット保存成功: {self.storage_dir} ({len(entries)}件)")
        return self.manifest_file

    def load_dataset(self) -> Dataset:
        """
        データセットを読み込み

        Returns:
            Dataset: 読み込んだデータセット (前処理前)
        """
        manifest = self._load_manifest()
        items = []
        for entry in manifest["items"]:
            image = read_fits_cutout(os.path.join(self.storage_dir, entry["image_file"]))
            image.preprocessed = bool(entry.get("preprocessed", False))
            mask = load_annotation(os.path.join(self.storage_dir, entry["annotation_file"]), shape=image.shape)
            meta = dict(entry.get("meta", {}), item_id=entry["item_id"])
            items.append(Cutout(image, mask, meta))
        return Dataset(items, class_counts=manifest.get("class_counts", {}))

    def list_items(self) -> List[str]:
        """
        カットアウトID一覧を取得

        Returns:
            List[str]: IDのリスト
        """
        try:
            return [entry["item_id"] for entry in self._load_manifest()["items"]]
        except LoadError:
            return []

    def get_statistics(self) -> Dict:
        """
        データセットの統計情報を取得

        Returns:
            Dict: 統計情報
        """
        ds = self.load_dataset()
        table = dataset_statistics(ds)
        return {
            "total_items": len(ds),
            "class_counts": ds.class_counts,
            "per_class": table.to_dict("records"),
        }
