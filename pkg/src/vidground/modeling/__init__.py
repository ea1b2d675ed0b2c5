from .model import GroundingModel, ModelConfig, ModelOutputs
from .denoise import NoiseConfig, NoiseDraw, perturb_moments

__all__ = [
    "GroundingModel",
    "ModelConfig",
    "ModelOutputs",
    "NoiseConfig",
    "NoiseDraw",
    "perturb_moments",
]
