"""Application configuration"""
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from POPINFER_* environment variables"""

    # Logging
    debug: bool = False
    json_logs: bool = True

    # Ensemble execution
    max_concurrent_runs: int = Field(4, ge=1)

    # Output
    metrics_filename: str = "metrics.prom"

    # Reports
    rolling_window: int = Field(50, ge=1)  # steps

    model_config = SettingsConfigDict(
        env_prefix="POPINFER_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )


# Global settings instance
settings = Settings()
