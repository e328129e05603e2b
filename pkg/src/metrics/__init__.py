"""
評価指標 (FID, SSIM, IoU, セグメンテーションスコア)
"""

from .features import augment_view, extract_features, nt_xent, train_feature_extractor
from .fid import FeatureSet, fid, frechet_distance
from .report import MetricReport, background_swap_check, background_swap_consistency, evaluate, off_source_std
from .segmentation import iou, mean_iou, segment_images, segmentation_score
from .ssim import ssim, ssim_map
