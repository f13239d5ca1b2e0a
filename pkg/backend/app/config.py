"""
Configuration management for the LipField pipeline.
"""
from pathlib import Path
from typing import Literal, Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process settings loaded from LIPFIELD_* environment variables."""

    # Application Settings
    environment: str = "development"
    log_level: str = "INFO"
    device: str = "cpu"

    # Speech Encoder Settings
    encoder: Literal['spectrogram', 'pretrained'] = 'spectrogram'
    pretrained_checkpoint: str = "facebook/wav2vec2-base-960h"
    encoder_layer: int = -1  # final transformer layer
    cache: Path = Path.home() / ".cache" / "lipfield"

    # Motion Settings
    sample_rate: int = 16000
    target_fps: float = 60.0

    # Inference Service Settings (optional)
    topology_path: Optional[str] = None
    neutral_mesh_path: Optional[str] = None
    s2l_checkpoint: Optional[str] = None
    s2d_checkpoint: Optional[str] = None

    class Config:
        env_file = ".env"
        env_prefix = "LIPFIELD_"
        case_sensitive = False


# Global settings instance
settings = Settings()
