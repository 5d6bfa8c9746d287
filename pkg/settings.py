"""
KripkeGuard - Settings
Environment-driven configuration (.env supported)
"""

from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

BASE_DIR = Path(__file__).resolve().parent


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    log_level: str = "INFO"

    # Remote hypothesis backend (chat-completions style endpoint)
    lm_endpoint_url: Optional[str] = None
    lm_api_key: Optional[str] = None
    lm_model_id: str = "default"
    lm_timeout_s: float = Field(default=10.0, gt=0)
    lm_max_retries: int = Field(default=2, ge=0)

    axioms_path: Path = BASE_DIR / "axioms" / "accelerator.ax"
    topology_path: Path = BASE_DIR / "topology" / "accelerator_sector.json"
    prompts_dir: Path = BASE_DIR / "prompts"

    @property
    def remote_configured(self) -> bool:
        return bool(self.lm_endpoint_url)


@lru_cache
def get_settings() -> Settings:
    return Settings()
