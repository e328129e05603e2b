"""
潜在空間でのノイズ除去拡散
"""

from .model import DiffusionConfig, RADiffModel, predict_noise
from .sampling import decode_latents, sample, sample_images, sample_latents
from .schedule import (
    NoiseSchedule,
    denoise_step,
    diffusion_loss,
    make_schedule,
    predict_x0,
    q_sample,
    standard_normal,
)
from .trainer import load_denoiser, train_diffusion
from .unet import DenoiserConfig, DenoiserNet
