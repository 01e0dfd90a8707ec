from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Literal
import os


class Settings(BaseSettings):
    # Output Configuration
    output_root: str = "./runs"

    # Reproducibility
    global_seed: int = 20240601
    deterministic: bool = True

    # Execution
    max_workers: int = 2  # Worker threads for ablation cells
    torch_threads: int = 1

    # Logging Configuration
    log_level: str = "INFO"
    log_format: Literal["json", "text"] = "json"
    log_file: str = "vqprofiles.log"

    model_config = SettingsConfigDict(
        env_prefix="VQP_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )


# Global settings instance
settings = Settings()


def resolve_output_dir(path: str) -> str:
    """Resolve a run-relative path against the configured output root"""
    if os.path.isabs(path):
        return path
    return os.path.join(settings.output_root, path)
