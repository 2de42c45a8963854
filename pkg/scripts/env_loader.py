"""
Environment loader for local runs and CI.
- Loads the repository-root .env when it exists
- Otherwise relies on the process environment (REFPOINT_SEED etc. set by the shell or CI)
"""
import logging
import os
from typing import Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))


def load_env(env_path: Optional[str] = None) -> Optional[str]:
    """
    Load environment variables with fallback support.

    Values already present in the process environment win over the file, so
    `REFPOINT_SEED=7 python scripts/run_pipeline.py ...` behaves as expected
    even with a .env lying around.

    Returns the path that was loaded, or None when no file was found.
    """
    env_path = env_path or os.path.join(REPO_ROOT, ".env")
    if os.path.exists(env_path):
        load_dotenv(env_path, override=False)
        logger.info(f"✅ Loaded environment from {env_path}")
        return env_path
    logger.info("ℹ️  No .env file found - using system environment variables")
    return None
