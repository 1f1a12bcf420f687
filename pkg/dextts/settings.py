"""
Environment-driven settings.

Values come from the process environment, optionally seeded from a `.env`
file in the working directory.
"""
import logging
import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)


class Settings(BaseModel):
    """Process-wide switches that are not model hyperparameters."""

    threads: int = Field(1, ge=1, description="Worker thread cap (DEX_THREADS)")
    log_level: str = Field("INFO", description="Root log level (LOG_LEVEL)")
    detailed_logs: bool = Field(True, description="Write per-run .log/.json files (ENABLE_DETAILED_LOGS)")
    log_dir: str = Field("logs", description="Directory for run logs (DEX_LOG_DIR)")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Read settings from the environment once.

    Returns:
        Settings populated from DEX_THREADS, LOG_LEVEL, ENABLE_DETAILED_LOGS
        and DEX_LOG_DIR

    Raises:
        pydantic.ValidationError: If DEX_THREADS is not a positive integer
    """
    load_dotenv()
    settings = Settings(
        threads=os.getenv("DEX_THREADS", "1"),
        log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
        detailed_logs=os.getenv("ENABLE_DETAILED_LOGS", "true").lower() == "true",
        log_dir=os.getenv("DEX_LOG_DIR", "logs"),
    )
    logger.debug(f"Settings loaded: {settings.model_dump()}")
    return settings
