"""
乱数シードの分配
トップレベルのシードから名前付きストリームごとに独立したシードを導出する
"""

import hashlib
import random
from typing import Callable, TypeVar

import numpy as np
import torch

T = TypeVar("T")


def derive_seed(top_seed: int, name: str) -> int:
    """
    名前付きストリームのシードを導出

    Args:
        top_seed (int): トップレベルのシード
        name (str): ストリーム名 (モジュール名など)

    Returns:
        int: 31bitのシード
    """
    digest = hashlib.sha256(f"{int(top_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def torch_generator(seed: int, device: str = "cpu") -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def seeded_build(factory: Callable[[], T], seed: int) -> T:
    """グローバル乱数状態を汚さずにシード固定でモデルを初期化"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def seed_everything(seed: int) -> None:
    """グローバル乱数状態を固定 (CLI実行時のみ使用)"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
