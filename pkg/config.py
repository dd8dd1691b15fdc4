"""
Configuration management for holgraph.
Environment-driven defaults for logging, numerics and parallelism.
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Config:
    """Centralized configuration management"""

    # Logging Configuration
    LOG_FILE: str = os.getenv("HOLGRAPH_LOG_FILE", "holgraph_log.jsonl")
    LOG_CONSOLE: bool = _flag("HOLGRAPH_LOG_CONSOLE", "1")

    # Numerics
    DEBUG_NUMERICS: bool = _flag("HOLGRAPH_DEBUG_NUMERICS", "0")
    PRECISION: str = os.getenv("HOLGRAPH_PRECISION", "float32")

    # Parallelism for premise caches and prover evaluation
    WORKERS: int = int(os.getenv("HOLGRAPH_WORKERS", "1"))

    @classmethod
    def validate_setup(cls) -> tuple[bool, str]:
        """
        Validate environment configuration

        Returns:
            (is_valid, error_message)
        """
        if cls.PRECISION not in ("float32", "float64"):
            return False, f"HOLGRAPH_PRECISION must be float32 or float64. Got: {cls.PRECISION}"

        if cls.WORKERS < 1:
            return False, f"HOLGRAPH_WORKERS must be at least 1. Got: {cls.WORKERS}"

        return True, ""
