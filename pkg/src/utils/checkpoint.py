"""
チェックポイント管理モジュール
名前付きテンソルとJSONヘッダー (設定・エポック・損失) をひとつのコンテナに保存する
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import pandas as pd
import torch

from .errors import LoadError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "radiff-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """読み込んだチェックポイント"""

    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, torch.Tensor]
    epoch: int = 0
    step: int = 0
    losses: Dict[str, float] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[Dict[str, Any]] = None
    path: Optional[str] = None

    def sub_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        """接頭辞 `prefix.` を持つテンソルを取り出す"""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def save_checkpoint(
    path: str,
    kind: str,
    config: Dict[str, Any],
    tensors: Dict[str, torch.Tensor],
    epoch: int = 0,
    step: int = 0,
    losses: Optional[Dict[str, float]] = None,
    extra: Optional[Dict[str, Any]] = None,
    optimizer: Optional[Dict[str, Any]] = None,
) -> str:
    """
    チェックポイントを保存

    Args:
        path (str): 保存先
        kind (str): モデル種別 (autoencoder, diffusion, ...)
        config (Dict[str, Any]): モデル設定 (JSON化可能なもの)
        tensors (Dict[str, torch.Tensor]): 名前付きテンソル
        epoch (int): 完了したエポック数
        step (int): 完了したステップ数
        losses (Optional[Dict[str, float]]): 最終損失
        extra (Optional[Dict[str, Any]]): 追加メタデータ
        optimizer (Optional[Dict[str, Any]]): オプティマイザ状態 (再開用)

    Returns:
        str: 保存したパス
    """
    header = {
        "kind": kind,
        "config": config,
        "epoch": epoch,
        "step": step,
        "losses": losses or {},
        "extra": extra or {},
    }
    container = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": json.dumps(header, sort_keys=True, default=str),
        "tensors": {name: t.detach().cpu().contiguous() for name, t in tensors.items()},
        "optimizer": optimizer,
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    torch.save(container, path)
    logger.info(f"チェックポイント保存: {path}", extra={"kind": kind, "epoch": epoch, "step": step})
    return path


def load_checkpoint(path: str, kind: Optional[str] = None) -> Checkpoint:
    """
    チェックポイントを読み込み

    Args:
        path (str): チェックポイントのパス
        kind (Optional[str]): 期待するモデル種別

    Returns:
        Checkpoint: 読み込んだ内容
    """
    if not path or not os.path.exists(path):
        raise LoadError("チェックポイントが見つかりません", path)
    try:
        container = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise LoadError("チェックポイントの読み込みに失敗しました", f"{path}: {e}") from e

    if not isinstance(container, dict) or container.get("format") != CHECKPOINT_FORMAT:
        raise LoadError("チェックポイント形式が不正です", path)
    if container.get("version") != CHECKPOINT_VERSION:
        raise LoadError("未対応のチェックポイントバージョンです", str(container.get("version")))

    header = json.loads(container["header"])
    if kind is not None and header["kind"] != kind:
        raise LoadError(f"チェックポイント種別が異なります: {header['kind']} != {kind}", path)

    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        tensors=container["tensors"],
        epoch=header["epoch"],
        step=header["step"],
        losses=header["losses"],
        extra=header["extra"],
        optimizer=container.get("optimizer"),
        path=path,
    )


def prefixed(prefix: str, state: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """state_dictのキーに接頭辞を付ける"""
    return {f"{prefix}.{k}": v for k, v in state.items()}


class LossLog:
    """エポック/ステップごとの損失をCSVに書き出す"""

    def __init__(self, path: str, columns: List[str], append: bool = False):
        self.path = path
        self.columns = columns
        self.rows: List[Dict[str, float]] = []
        if append and os.path.exists(path):
            self.rows = pd.read_csv(path).to_dict("records")

    def append(self, **values: float) -> None:
        self.rows.append({c: values[c] for c in self.columns})

    def flush(self) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        pd.DataFrame(self.rows, columns=self.columns).to_csv(self.path, index=False)

    def last(self) -> Optional[Dict[str, float]]:
        return self.rows[-1] if self.rows else None
