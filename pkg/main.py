"""
RADiff - 電波天文画像の条件付き潜在拡散パイプライン
メインエントリーポイント
"""

import os
import sys

# プロジェクトルートをPythonパスに追加
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from src.cli.runner import run  # noqa: E402


def main() -> int:
    """コマンドライン引数を渡して実行"""
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
