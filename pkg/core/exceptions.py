from typing import Optional


class CocsiError(Exception):
    """Base class for every error raised by the laboratory.

    ``category`` is the short machine-parsable tag printed by the CLI.
    """

    category = "error"


class InvalidArgumentError(CocsiError, ValueError):
    category = "invalid-argument"


class ConfigError(CocsiError, ValueError):
    """Invalid experiment configuration, naming the offending key and line"""

    category = "config"

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if key is not None:
            location = f"{key}"
            if line is not None:
                location += f" (line {line})"
            location += ": "
        super().__init__(f"{location}{message}")
        self.detail = message
        self.key = key
        self.line = line


class FormatError(CocsiError):
    """Malformed binary artifact; ``offset`` is the byte position of the problem"""

    category = "format"

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    category = "unsupported-version"


class ContractError(CocsiError, RuntimeError):
    category = "contract"


class MissingArtifactError(CocsiError, FileNotFoundError):
    """A required input artifact (dataset, checkpoint) does not exist"""

    def __init__(self, kind: str, path: str):
        super().__init__(f"{kind} not found: {path}")
        self.kind = kind
        self.path = path
        self.category = f"missing-{kind}"
