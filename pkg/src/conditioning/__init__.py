"""
マスク条件と背景条件
"""

from .condition import (
    BackgroundEmbedding,
    ConditionBundle,
    ConditionSpec,
    MaskChannels,
    assemble_condition,
    decode_mask_channels,
    encode_background,
    encode_mask,
    load_condition_specs,
    one_hot_planes,
)
from .encoder import BackgroundEncoder
