import hashlib
import logging
import os
from pathlib import Path
import sys
import time
from typing import Union

LOG_LEVEL_ENV = "PSYCHOCAL_LOG"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_log(log_dir: Union[str, Path], command: str) -> Path:
    """
    Creates a log file unique to the run.

    Args:
        log_dir (str | Path): The directory where the log file will be created.
        command (str): The CLI subcommand being run.

    Returns:
        Path: The path to the log file.
    """
    timestamp = time.strftime("%Y-%m-%d, %H:%M:%S")

    hash = hashlib.sha256(f"{command}_{timestamp}_{os.getpid()}".encode())
    run_id = hash.hexdigest()[:16]
    log_path = Path(log_dir) / f"{command}_{run_id}.log"

    os.makedirs(log_dir, exist_ok=True)

    with open(log_path, "w", encoding="utf-8") as log_file:
        log_file.write(f"Command: {command}\n")
        log_file.write(f"Run Start Time: {timestamp}\n")
        log_file.write("\n")

    return log_path


def configure_logging(log_path: Union[str, Path, None] = None) -> None:
    """
    Configure the root psychocal logger. The level is read from the PSYCHOCAL_LOG
    environment variable (defaults to INFO).

    Args:
        log_path (str | Path, optional): Log file to append records to, as created by setup_log. Defaults to None.

    Returns:
        None
    """
    level_name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.INFO

    logger = logging.getLogger("psychocal")
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)

    if log_path is not None:
        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
