"""
RADiff - 電波天文画像の条件付き潜在拡散パイプライン
"""

__version__ = "1.0.0"
