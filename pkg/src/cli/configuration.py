"""
実行設定
キー=値形式の設定ファイル (include対応)、環境変数、--set による上書きを1つのRunConfigにまとめる
"""

import json
import os
import typing
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field

from config.settings import Config
from ..augment.experiment import AugmentationPlan
from ..augment.mask_ddpm import MaskDDPMConfig
from ..autoencoder.model import AutoencoderConfig
from ..compositor.flux import FluxModel
from ..diffusion.model import DiffusionConfig
from ..models.extractor import ExtractorConfig
from ..models.segmenter import SegmenterConfig
from ..utils.errors import ParameterError

ENV_PREFIX = "RADIFF_"
INCLUDE_KEY = "include"


class RunConfig(BaseModel):
    """コマンド共通の実行設定 (未知のキーはエラー)"""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=Config.get_setting("default_seed"), description="トップレベルのシード")
    out_dir: str = Field(default="runs/latest", description="出力ディレクトリ")
    device: str = "cpu"
    progress: bool = False

    # データ
    data_dir: str = Field(default=Config.get_setting("toy_data_dir"), description="データセットディレクトリ")
    n_items: int = Field(default=64, ge=0, description="トイデータの件数")
    image_size: int = Config.get_setting("image_size")
    class_mix: Tuple[float, ...] = (0.5, 0.3, 0.2)
    map_size: int = Field(default=256, ge=0, description="トイ背景マップの一辺 (0なら作らない)")
    split_ratio: float = Field(default=Config.get_setting("split_ratio"), gt=0, lt=1, description="学習に回す割合")
    tanh_scale: Optional[float] = Field(default=None, gt=0, description="未指定なら画像ごとに5×MAD")
    normalize: bool = False

    # チェックポイント (未指定なら out_dir、次に RADIFF_HOME を探す)
    ae_checkpoint: Optional[str] = None
    diffusion_checkpoint: Optional[str] = None
    mask_ddpm_checkpoint: Optional[str] = None
    segmenter_checkpoint: Optional[str] = None
    extractor_checkpoint: Optional[str] = None
    resume_from: Optional[str] = None

    # サンプリング・評価
    conditions: Optional[str] = Field(default=None, description="条件指定ファイル (JSON)")
    n_samples: int = Field(default=8, ge=0)
    sample_batch_size: int = Field(default=16, ge=1)
    generated_dir: Optional[str] = None
    plots: bool = True
    image_format: Literal["png", "svg", "pdf"] = Config.get_setting("image_format")

    # 拡張実験・マップ合成
    plan: Optional[str] = Field(default=None, description="拡張計画ファイル (JSON)")
    background_map: Optional[str] = None
    n_crops: int = Field(default=0, ge=0)
    overlap: float = Field(default=0.0, ge=0, lt=1)

    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    mask_ddpm: MaskDDPMConfig = Field(default_factory=MaskDDPMConfig)
    segmenter: SegmenterConfig = Field(default_factory=SegmenterConfig)
    extractor: ExtractorConfig = Field(default_factory=ExtractorConfig)
    flux: FluxModel = Field(default_factory=FluxModel)
    augmentation: AugmentationPlan = Field(default_factory=AugmentationPlan)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True, ensure_ascii=False)


def load_config_file(path: str, _stack: Optional[List[str]] = None) -> Dict[str, str]:
    """
    キー=値の設定ファイルを読み込む

    `include` キーが指す別ファイル (このファイルからの相対パス) を先に読み込み、このファイルの値で上書きする。

    Args:
        path (str): 設定ファイルのパス

    Returns:
        Dict[str, str]: フラットなキーと値
    """
    path = os.path.abspath(path)
    stack = list(_stack or [])
    if path in stack:
        raise ParameterError("設定ファイルのincludeが循環しています", " -> ".join(stack + [path]))
    if not os.path.exists(path):
        raise ParameterError("設定ファイルが見つかりません", path)

    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    merged: Dict[str, str] = {}
    include = values.pop(INCLUDE_KEY, None)
    if include:
        for name in include.split(","):
            name = name.strip()
            if name:
                target = name if os.path.isabs(name) else os.path.join(os.path.dirname(path), name)
                merged.update(load_config_file(target, stack + [path]))
    merged.update(values)
    return merged


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    """--set KEY=VALUE のリストを辞書に変換"""
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ParameterError("--set は KEY=VALUE 形式である必要があります", item)
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def env_overrides(environ: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """RADIFF_<FIELD> 形式の環境変数からトップレベルのスカラー設定を取り出す"""
    environ = os.environ if environ is None else environ
    values = {}
    for name, field in RunConfig.model_fields.items():
        if _is_model(field.annotation):
            continue
        value = environ.get(ENV_PREFIX + name.upper())
        if value is not None:
            values[name] = value
    return values


def _unwrap_optional(annotation: Any) -> Any:
    if typing.get_origin(annotation) is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return annotation


def _is_model(annotation: Any) -> bool:
    annotation = _unwrap_optional(annotation)
    return isinstance(annotation, type) and issubclass(annotation, BaseModel)


def _coerce(annotation: Any, value: str) -> Any:
    """文字列値をフィールドの型に合わせて前処理 (カンマ区切りのタプル・辞書、none)"""
    inner = _unwrap_optional(annotation)
    if value.lower() in ("none", "null") and inner is not annotation:
        return None
    origin = typing.get_origin(inner)
    if origin in (tuple, list):
        return [v.strip() for v in value.split(",") if v.strip()]
    if origin is dict:
        pairs = {}
        for part in value.split(","):
            if part.strip():
                if ":" not in part:
                    raise ParameterError("辞書の値は key:value のカンマ区切りで指定してください", value)
                key, item = part.split(":", 1)
                pairs[key.strip()] = item.strip()
        return pairs
    return value


def _nest(model_cls: type, flat: Dict[str, str]) -> Dict[str, Any]:
    """'section.field' 形式のキーを入れ子の辞書に変換する"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        field = model_cls.model_fields.get(head)
        if field is None:
            aliases = {f.alias: name for name, f in model_cls.model_fields.items() if f.alias}
            if head in aliases:
                head, field = aliases[head], model_cls.model_fields[aliases[head]]
        if field is None:
            # 未知のキーはそのまま渡してpydanticに拒否させる
            nested[key] = value
            continue
        if rest:
            if not _is_model(field.annotation):
                raise ParameterError(f"'{head}' は入れ子の設定を持ちません", key)
            sub = nested.setdefault(head, {})
            sub.update(_nest(_unwrap_optional(field.annotation), {rest: value}))
        else:
            nested[head] = _coerce(field.annotation, value)
    return nested


def _deep_update(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def resolve_run_config(
    config_path: Optional[str] = None,
    overrides: Optional[Sequence[str]] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    environ: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """
    設定を優先順位どおりに合成する

    デフォルト < 環境変数 (RADIFF_*) < 設定ファイル < --set < --seed / --out

    Returns:
        RunConfig: 検証済みの設定
    """
    layers: List[Dict[str, str]] = [env_overrides(environ)]
    if config_path:
        layers.append(load_config_file(config_path))
    layers.append(parse_overrides(overrides or []))

    data: Dict[str, Any] = {}
    for layer in layers:
        _deep_update(data, _nest(RunConfig, layer))
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    return RunConfig(**data)
