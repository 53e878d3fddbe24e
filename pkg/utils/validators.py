import math
import os
import re
from pathlib import Path

import numpy as np

from core.exceptions import InvalidArgumentError


def validate_file_path(file_path: str) -> bool:
    """Validate that a file path exists and is a regular file"""
    try:
        path = Path(file_path)
        return path.exists() and path.is_file()
    except (OSError, ValueError):
        return False


def sanitize_filename(filename: str) -> str:
    """Sanitize an artifact name (model tags, arm names) for safe storage"""
    filename = re.sub(r'[<>:"/\\|?*\s]', '_', filename)
    filename = filename.strip(' .')

    if len(filename) > 255:
        name, ext = os.path.splitext(filename)
        filename = name[:255 - len(ext)] + ext

    return filename


def require_positive_int(name: str, value: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < 1:
        raise InvalidArgumentError(f"{name} must be >= 1, got {value}")
    return value


def require_positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise InvalidArgumentError(f"{name} must be > 0, got {value}")
    return value


def require_non_negative(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise InvalidArgumentError(f"{name} must be >= 0, got {value}")
    return value


def require_probability(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")
    return value


def require_seed(name: str, value: int) -> int:
    """Seeds are stored as u64 and fed to SeedSequence, so they must lie in [0, 2**64)"""
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if not 0 <= value < 2 ** 64:
        raise InvalidArgumentError(f"{name} must lie in [0, 2**64), got {value}")
    return value


def require_in_range(name: str, value: float, low: float, high: float) -> float:
    value = float(value)
    if not low <= value <= high:
        raise InvalidArgumentError(f"{name} must lie in [{low}, {high}], got {value}")
    return value


def format_file_size(size_bytes: int) -> str:
    """Format file size in human readable format"""
    if size_bytes < 1024:
        return f"{size_bytes} B"
    elif size_bytes < 1024 * 1024:
        return f"{size_bytes / 1024:.1f} KB"
    elif size_bytes < 1024 * 1024 * 1024:
        return f"{size_bytes / (1024 * 1024):.1f} MB"
    else:
        return f"{size_bytes / (1024 * 1024 * 1024):.1f} GB"
