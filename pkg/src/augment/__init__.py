"""
マスク合成・画像-マスク組の生成・データ拡張実験
"""

from .experiment import (
    AugmentationPlan,
    ExperimentReport,
    ExperimentRow,
    reduce_train_set,
    run_augmentation_experiment,
)
from .mask_ddpm import (
    MaskDDPMConfig,
    instance_statistics,
    load_mask_ddpm,
    masks_to_planes,
    quantize_planes,
    resolve_class_filter,
    synthesize_masks,
    train_mask_ddpm,
)
from .pairs import generate_pairs
from .segmenter import evaluate_segmenter, train_segmenter
