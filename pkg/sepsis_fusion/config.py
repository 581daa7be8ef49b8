from pathlib import Path
import os

from sepsis_fusion.errors import ConfigError


PACKAGE_DIR = Path(__file__).resolve().parent


class Config:
    DATABASE_URL = os.getenv("SEPSIS_FUSION_DATABASE_URL", "sqlite:///sepsis_fusion.db")
    OUTPUT_DIR = os.getenv("SEPSIS_FUSION_OUTPUT_DIR", "results")
    THREADS = os.getenv("SEPSIS_FUSION_THREADS", "1")
    LOG_LEVEL = os.getenv("SEPSIS_FUSION_LOG_LEVEL", "INFO")
    PRESETS_DIR = Path(os.getenv("SEPSIS_FUSION_PRESETS_DIR", PACKAGE_DIR / "presets"))
    LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    @classmethod
    def threads(cls):
        """THREADS as a positive int; read when a command runs, not at import."""
        try:
            value = int(cls.THREADS)
        except (TypeError, ValueError):
            raise ConfigError(f"SEPSIS_FUSION_THREADS must be a positive integer, got {cls.THREADS!r}") from None
        if value < 1:
            raise ConfigError(f"SEPSIS_FUSION_THREADS must be a positive integer, got {value}")
        return value
