"""Multi-view hair transfer with latent diffusion, at desk scale."""

__version__ = "0.1.0"

from .config import GuidanceConfig, ModelConfig, RunConfig, StageConfig

__all__ = ["GuidanceConfig", "ModelConfig", "RunConfig", "StageConfig", "__version__"]
