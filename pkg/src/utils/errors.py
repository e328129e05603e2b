"""
例外クラス群
各操作が送出するエラーをカテゴリ別に定義し、CLIの終了コードへ対応付ける
"""

from typing import Optional

# 終了コード
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3


class RadiffError(Exception):
    """RADiff共通の基底例外"""

    category = "runtime"
    exit_code = EXIT_RUNTIME

    def __init__(self, message: str, detail: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def __str__(self) -> str:
        if self.detail:
            return f"{self.message} ({self.detail})"
        return self.message


class _ValidationFailure(RadiffError):
    exit_code = EXIT_VALIDATION


class ParameterError(_ValidationFailure, ValueError):
    category = "parameter"


class ShapeError(_ValidationFailure, ValueError):
    category = "shape"


class FormatError(_ValidationFailure):
    category = "format"


class UnsupportedError(_ValidationFailure):
    category = "unsupported"


class SchemaError(_ValidationFailure):
    category = "schema"


class DataError(_ValidationFailure, ValueError):
    category = "data"


class PlanError(_ValidationFailure):
    category = "plan"


class ResolutionError(RadiffError):
    """アノテーションが参照するファイルが見つからない"""

    category = "resolution"


class NumericError(RadiffError, ArithmeticError):
    category = "numeric"


class DivergenceError(RadiffError):
    """学習中に損失がNaN/Infになった"""

    category = "divergence"


class LoadError(RadiffError):
    category = "load"


class DependencyError(RadiffError):
    """必要な学習済みモデルが揃っていない"""

    category = "dependency"


class QualityError(RadiffError):
    category = "quality"


class PlacementError(RadiffError):
    category = "placement"


class DegenerateMapError(RadiffError):
    category = "degenerate-map"


class UsageError(RadiffError):
    category = "usage"
    exit_code = EXIT_USAGE
