"""
潜在空間を学習するKLオートエンコーダー
"""

from .model import AutoencoderConfig, AutoencoderKL
from .ops import LatentDistribution, LatentGrid, ae_losses, decode, encode, kl_to_standard_normal, sample_latent
from .trainer import load_autoencoder, train_autoencoder
