"""Subcommands of the ``samiro-lab`` console script, loaded by the launcher."""

import logging
import os

from config import LabConfig

logger = logging.getLogger("lab")


def load_config(path: str | os.PathLike | None) -> LabConfig:
    """Load and validate a run config, logging the fully resolved document."""
    config = LabConfig.from_file(path)
    logger.info(
        {
            "event": "config_resolved",
            "source": str(path) if path is not None else "<defaults>",
            "config_hash": config.config_hash(),
            "resolved": config.resolved_text(),
        }
    )
    return config
