"""Engine configuration management."""

from pathlib import Path
from typing import Any, Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict


class Settings(BaseSettings):
    """Engine defaults.

    Values come from keyword arguments only. Environment variables and dotenv
    files are not consulted, so a run is fully described by its CLI flags.
    """

    model_config = SettingsConfigDict(
        case_sensitive=False,
        extra="ignore",
        frozen=True,
    )

    # Logging
    log_level: str = Field(default="INFO", description="Logging level")
    log_format: str = Field(default="console", description="console or json")

    # Observation-time schedule
    tau1: float = Field(default=7.5, gt=0, description="Logit schedule tau_1")
    tau2: float = Field(default=2.5, gt=0, description="Logit schedule tau_2")
    steps: int = Field(default=2000, ge=2, description="Number of observation times T")

    # Forward process
    rate: float = Field(default=120.0, gt=0, description="Unit jump rate r per direction")
    prob_floor: float = Field(default=1e-300, gt=0, description="Kernel ratio denominator floor")
    kernel_cache_dir: Optional[Path] = Field(default=None, description="Kernel dump cache")

    # Sampler
    eps: float = Field(default=0.15, description="CFL tolerance")
    max_steps: int = Field(default=200_000, ge=1, description="Sampler safety bound")

    # Metrics
    ssim_window: int = Field(default=8, ge=2, description="SSIM window side")

    # Workers
    threads: int = Field(default=1, description="Worker cap for parallel sections")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        """Honour init kwargs only."""
        return (init_settings,)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        return v.upper()

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        """Validate log renderer name."""
        if v.lower() not in ("console", "json"):
            raise ValueError("Log format must be 'console' or 'json'")
        return v.lower()

    @field_validator("eps")
    @classmethod
    def validate_eps(cls, v: float) -> float:
        """CFL tolerance must lie strictly inside (0, 1)."""
        if not 0.0 < v < 1.0:
            raise ValueError("eps must satisfy 0 < eps < 1")
        return v

    @field_validator("threads")
    @classmethod
    def validate_threads(cls, v: int) -> int:
        """Validate worker cap."""
        if v < 1 or v > 256:
            raise ValueError("threads must be between 1 and 256")
        return v


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get engine settings instance."""
    return settings


def configure(**overrides: Any) -> Settings:
    """Replace the global settings with the defaults updated by ``overrides``."""
    global settings
    values = settings.model_dump()
    values.update({k: v for k, v in overrides.items() if v is not None})
    settings = Settings(**values)
    return settings
