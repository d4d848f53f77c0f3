"""
Environment settings
Process-wide knobs read from the environment (optionally from a .env file)
"""

import os
from typing import Optional

from dotenv import load_dotenv


class Settings:
    """Environment-backed settings"""

    def __init__(self):
        self.seed: Optional[int] = None
        seed = os.getenv("SRPERM_SEED")
        if seed:
            self.seed = int(seed)

        self.log_level = os.getenv("SRPERM_LOG_LEVEL", "INFO").upper()
        self.dp_budget = float(os.getenv("SRPERM_DP_BUDGET", "1e9"))
        self.memory_cap_mb = float(os.getenv("SRPERM_MEMORY_CAP_MB", "2048"))
        self.workers = int(os.getenv("SRPERM_WORKERS", "1"))

    def reload(self, dotenv_path: Optional[str] = None):
        """Re-read the environment, loading a .env file first if present"""
        load_dotenv(dotenv_path, override=False)
        self.__init__()
        return self


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Accessor for the global settings"""
    return settings
