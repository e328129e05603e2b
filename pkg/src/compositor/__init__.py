"""
大規模合成マップの作成
"""

from .canvas import SkyCanvas, cut_background_patch, place_objects, write_catalog
from .compose import compose_map
from .flux import FluxModel, measure_background_sigma, rescale_flux, sample_k
from .stamps import ObjectStamp, extract_objects
