"""
例外・ログ・チェックポイント・乱数シードのユーティリティ
"""
