import os
from dataclasses import dataclass
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

@dataclass
class Config:
    """Environment-level settings for the solver suite"""
    # Artifact tree (field files, convergence traces, sweeps)
    OUTPUT_DIR: str = os.getenv("WEZ_OUTPUT_DIR", "./artifacts")

    # Worker count for solver sweeps and sweep fan-out
    THREADS: int = int(os.getenv("WEZ_THREADS", "1"))

    # Logging
    LOG_LEVEL: str = os.getenv("WEZ_LOG_LEVEL", "INFO")
    LOG_EVERY: int = int(os.getenv("WEZ_LOG_EVERY", "500"))  # Iterations between convergence log lines

    # Number of loaded fields kept in memory
    FIELD_CACHE_SIZE: int = int(os.getenv("WEZ_FIELD_CACHE_SIZE", "4"))

config = Config()
