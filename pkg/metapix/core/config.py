from functools import lru_cache
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PROJECT_NAME: str = "MetaPix"
    VERSION: str = "1.0.0"

    # Where timestamped run directories are created
    RUN_ROOT: Path = Path("runs")

    # Default location of the generated synthetic dataset
    DATA_ROOT: Path = Path("data/synthetic")

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_TO_FILE: bool = True

    model_config = SettingsConfigDict(
        env_prefix="METAPIX_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """
    Get settings from environment variables or .env file.
    Cached; tests clear it with ``get_settings.cache_clear()``.
    """
    return Settings()
