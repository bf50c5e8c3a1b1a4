import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

THREADS_ENV = "GMMCALIB_THREADS"
SIGNIFICANT_DIGITS = 9


def round_floats(data: Any, digits: int = SIGNIFICANT_DIGITS) -> Any:
    """Round every finite float nested in dicts, lists and tuples to ``digits`` significant digits."""
    if isinstance(data, float):
        return float(f"{data:.{digits}g}") if math.isfinite(data) else data
    if isinstance(data, dict):
        return {k: round_floats(v, digits) for k, v in data.items()}
    if isinstance(data, list | tuple):
        return [round_floats(v, digits) for v in data]
    return data


def dump_json(data: Any) -> str:
    """Stable JSON text with floats at persisted precision."""
    return json.dumps(round_floats(data), indent=2, sort_keys=True) + "\n"


def create_directory(path: Path) -> None:
    """Create directory and all parent directories if they don't exist."""
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        log_error(f"Error creating directory {path}", e)
        raise


def list_files(directory: Path, extension: str) -> list[Path]:
    """List all files with given extension in directory, sorted by name."""
    if not directory.is_dir():
        logger.warning(f"Directory does not exist: {directory}")
        return []

    return sorted(directory.glob(f"*.{extension.lstrip('.')}"))


def list_subdirectories(directory: Path) -> list[Path]:
    """List immediate subdirectories sorted by name."""
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_dir())


def atomic_write_text(path: Path, text: str) -> Path:
    """Write text to ``path`` via a temporary file in the same directory and a rename."""
    path = Path(path)
    create_directory(path.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    tmp_path = Path(tmp_name)
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        tmp_path.replace(path)
    except OSError as e:
        log_error(f"Error writing {path}", e)
        safe_delete_file(tmp_path)
        raise
    return path


def safe_delete_file(file_path: Path) -> bool:
    """Safely delete a file if it exists.

    Returns:
        bool: True if file was deleted or didn't exist, False if deletion failed
    """
    try:
        file_path.unlink(missing_ok=True)
    except OSError as e:
        log_error(f"Error deleting file {file_path}", e)
        return False
    else:
        return True


def worker_count(requested: int | None = None) -> int:
    """Resolve the number of worker threads.

    ``GMMCALIB_THREADS`` caps whatever is requested; without either the CPU count is used.
    """
    count = requested if requested and requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            count = min(count, max(1, int(cap)))
        except ValueError:
            logger.warning(f"Ignoring invalid {THREADS_ENV}={cap!r}")
    return max(1, count)


def log_error(message: str, exception: Exception) -> None:
    """Log an error message with exception details."""
    logger.error(f"{message}: {exception!s}")
