import hashlib
import logging
import struct
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.exceptions import ConfigError, FormatError

logger = logging.getLogger(__name__)


class FileParser:
    """Utility class for parsing the laboratory's text artifacts"""

    @staticmethod
    def parse_key_value(content: str) -> List[Tuple[str, str, int]]:
        """Parse flat ``key = value`` text.

        Args:
            content: file contents; '#' starts a comment, blank lines are skipped

        Returns:
            (key, raw value, 1-based line number) in file order
        """
        entries = []

        for line_no, line in enumerate(content.split('\n'), start=1):
            line = line.split('#', 1)[0].strip()

            # Skip comments and empty lines
            if not line:
                continue

            if '=' not in line:
                raise ConfigError(f"expected 'key = value', got {line!r}", key=line, line=line_no)

            key, value = line.split('=', 1)
            key = key.strip()
            if not key:
                raise ConfigError("missing key before '='", key='<empty>', line=line_no)
            entries.append((key, value.strip(), line_no))

        return entries

    @staticmethod
    def parse_override(text: str) -> Tuple[str, str]:
        """Parse one ``--set key=value`` override"""
        if '=' not in text:
            raise ConfigError(f"override must look like key=value, got {text!r}", key=text, line=0)
        key, value = text.split('=', 1)
        return key.strip(), value.strip()

    @staticmethod
    def parse_bool(value: str) -> bool:
        lowered = value.strip().lower()
        if lowered in ('true', 'yes', 'on', '1'):
            return True
        if lowered in ('false', 'no', 'off', '0'):
            return False
        raise ValueError(f"not a boolean: {value!r}")

    @staticmethod
    def parse_list(value: str, cast: Callable[[str], Any]) -> List[Any]:
        """Parse a comma separated list, e.g. ``0.1, 0.01, 0.001``"""
        items = [item.strip() for item in value.strip().strip('[]').split(',')]
        return [cast(item) for item in items if item]


class BinaryReader:
    """Little-endian cursor over a byte buffer that reports truncation offsets"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def read(self, fmt: str) -> Tuple:
        size = struct.calcsize('<' + fmt)
        if self.remaining() < size:
            raise FormatError(f"truncated: need {size} bytes, {self.remaining()} left", offset=self.offset)
        values = struct.unpack_from('<' + fmt, self.data, self.offset)
        self.offset += size
        return values

    def read_one(self, fmt: str):
        return self.read(fmt)[0]

    def read_bytes(self, count: int) -> bytes:
        if self.remaining() < count:
            raise FormatError(f"truncated: need {count} bytes, {self.remaining()} left", offset=self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def read_array(self, dtype: str, count: int) -> np.ndarray:
        """Read ``count`` little-endian values of ``dtype`` (e.g. '<f4')"""
        item = np.dtype(dtype)
        raw = self.read_bytes(item.itemsize * count)
        return np.frombuffer(raw, dtype=item, count=count).copy()


class BinaryWriter:
    def __init__(self):
        self.buffer = bytearray()

    def write(self, fmt: str, *values) -> None:
        self.buffer += struct.pack('<' + fmt, *values)

    def write_bytes(self, data: bytes) -> None:
        self.buffer += data

    def write_array(self, values: np.ndarray, dtype: str) -> None:
        self.buffer += np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes()

    def getvalue(self) -> bytes:
        return bytes(self.buffer)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a table as UTF-8 CSV with a header row and no index column"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def sha256_text(content: str) -> str:
    return hashlib.sha256(content.encode('utf-8')).hexdigest()


def write_manifest(path: Path,
                   config_text: str,
                   seeds: Dict[str, int],
                   artifacts: Sequence[Path],
                   extra: Optional[Dict[str, str]] = None) -> Path:
    """Write the run manifest: config hash, seeds and produced artifacts"""
    path = Path(path)
    lines = [f"config_sha256 = {sha256_text(config_text)}"]
    for name, value in sorted(seeds.items()):
        lines.append(f"seed.{name} = {value}")
    for name, value in sorted((extra or {}).items()):
        lines.append(f"{name} = {value}")
    for artifact in artifacts:
        lines.append(f"artifact = {Path(artifact).name}")
    lines.append("")
    lines.append("# resolved configuration")
    lines.extend(config_text.rstrip('\n').split('\n'))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path
