"""
アプリケーション設定
"""

import os
from typing import Dict, Any


class Config:
    """アプリケーション設定クラス"""

    # デフォルト設定
    DEFAULT_SETTINGS = {
        "app_title": "RADiff - 電波天文画像生成パイプライン",
        "data_dir": "data",
        "toy_data_dir": "data/toy",
        "config_dir": "config",
        "radiff_home": "~/.radiff",
        "default_seed": 0,
        "split_ratio": 0.8,
        "image_size": 32,
        "min_cutout_size": 8,
        "num_classes": 3,
        "log_level": "INFO",
        "image_format": "png",
    }

    # クラスコード (0 = 背景)
    CLASS_CODES = {
        "background": 0,
        "compact": 1,
        "extended": 2,
        "spurious": 3,
    }

    # ノイズスケジュール
    SCHEDULES = {
        "full": {"timesteps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
        "desk": {"timesteps": 200, "beta_start": 5e-4, "beta_end": 0.1},
    }

    # 大規模マップ合成のフラックスモデル
    FLUX_MODEL = {
        "lam": 3.0,
        "cap": 10.0,
        "max_attempts": 1000,
    }

    # チェックポイントのファイル名
    CHECKPOINTS = {
        "autoencoder": "autoencoder.pt",
        "diffusion": "diffusion.pt",
        "mask_ddpm": "mask_ddpm.pt",
        "segmenter": "segmenter.pt",
        "extractor": "extractor.pt",
    }

    @classmethod
    def get_setting(cls, key: str, default: Any = None) -> Any:
        """設定値を取得"""
        return cls.DEFAULT_SETTINGS.get(key, default)

    @classmethod
    def get_env_path(cls) -> str:
        """環境設定ファイルのパスを取得"""
        return os.path.join(cls.get_setting("config_dir"), ".env")

    @classmethod
    def get_radiff_home(cls) -> str:
        """チェックポイントのルートディレクトリ (RADIFF_HOME) を取得"""
        home = os.environ.get("RADIFF_HOME", cls.get_setting("radiff_home"))
        return os.path.abspath(os.path.expanduser(home))

    @classmethod
    def get_checkpoint_path(cls, kind: str) -> str:
        """種類ごとのデフォルトチェックポイントパスを取得"""
        if kind not in cls.CHECKPOINTS:
            raise KeyError(f"未知のチェックポイント種別: {kind}")
        return os.path.join(cls.get_radiff_home(), cls.CHECKPOINTS[kind])

    @classmethod
    def get_schedule(cls, name: str = "desk") -> Dict[str, Any]:
        """名前付きノイズスケジュールの設定を取得"""
        return dict(cls.SCHEDULES[name])

    @classmethod
    def class_name(cls, code: int) -> str:
        """クラスコードから名前を取得"""
        for name, value in cls.CLASS_CODES.items():
            if value == code:
                return name
        raise KeyError(f"未知のクラスコード: {code}")
