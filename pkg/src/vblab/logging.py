"""Logging configuration for vblab.

Messages go to stderr; stdout stays reserved for JSON/CSV data. Long runs
can additionally keep a timestamped log file.
"""

import logging
import sys
from pathlib import Path
from typing import Optional

# Package-level logger
logger = logging.getLogger('vblab')

CONSOLE_FORMAT = '%(levelname)s: %(message)s'
FILE_FORMAT = '%(asctime)s %(name)s %(levelname)s: %(message)s'


def level_from_flags(debug: bool = False, verbose: bool = False,
                     quiet: bool = False) -> int:
    """Map the CLI verbosity flags to a level; ``debug`` wins over the rest."""
    if debug:
        return logging.DEBUG
    if verbose:
        return logging.INFO
    if quiet:
        return logging.ERROR
    return logging.WARNING


def setup_logging(
    level: int = logging.WARNING,
    format_string: Optional[str] = None,
    log_file: Optional[Path] = None,
) -> None:
    """Configure logging for vblab.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        format_string: Custom console format string, or None for default
        log_file: Also write records at ``level`` to this file
    """
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(format_string or CONSOLE_FORMAT))

    for old in logger.handlers:
        old.close()
    logger.handlers.clear()
    logger.addHandler(handler)
    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        logger.addHandler(file_handler)
    logger.setLevel(level)


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Get a logger for a submodule, e.g. ``get_logger('trainer')``."""
    if name:
        return logging.getLogger(f'vblab.{name}')
    return logger


# Set up default logging (warnings and above)
setup_logging()
