"""
Configuration Management
"""

from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Config(BaseSettings):
    """
    Process configuration

    Run hyperparameters are managed through layered YAML presets:
    - app/config/presets/base.yaml - Base configuration
    - app/config/presets/indoor.yaml - Indoor scenes (tau_max 50 px, lr 3e-4)
    - app/config/presets/outdoor.yaml - Outdoor scenes (tau_max 100 px, lr 5e-5)
    - app/config/presets/desk.yaml - Desk-scale synthetic runs on a CPU
    - app/config/presets/test.yaml - Tiny settings for the test suite
    """

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # ========================================================================
    # Service Configuration
    # ========================================================================

    SERVICE_NAME: str = "pl2map-relocalizer"
    VERSION: str = "0.1.0"

    # ========================================================================
    # Presets
    # ========================================================================

    # Preset layered over base.yaml when --preset is not given
    PRESET: str = "desk"
    PRESETS_DIR: Path = Path(__file__).resolve().parent.parent / "config" / "presets"

    # ========================================================================
    # Logging
    # ========================================================================

    LOG_LEVEL: str = "INFO"
    # Extra file sink, stderr is always on
    LOG_FILE: Optional[str] = None

    # ========================================================================
    # Training
    # ========================================================================

    # Prepare the next augmented sample on a worker thread
    TRAIN_PREFETCH: bool = False

    # ========================================================================
    # File Management
    # ========================================================================

    # Remove *.tmp leftovers of interrupted atomic writes
    CLEAN_TMP_FILE: bool = True


# Global config instance
config = Config()
