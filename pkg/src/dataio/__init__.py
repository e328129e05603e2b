"""
データ入出力・前処理・トイデータ生成
"""

from .annotations import load_annotation, objects_from_mask, write_annotation
from .dataset import dataset_statistics, image_rms, split_dataset, split_indices
from .dataset_store import DatasetStore
from .fits_io import read_fits_cutout, write_fits_cutout
from .preprocessing import default_scale, preprocess, preprocess_dataset
from .toy_generator import generate_toy_dataset
from .types import CLASS_NAMES, Cutout, Dataset, Image2D, ObjectRecord, SegMask, count_components
