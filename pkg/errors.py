"""
Exception hierarchy shared by every layer

Each error carries a machine-readable category that the command line maps to
an exit code.
"""


class DSClusterError(Exception):
    """Base class for all toolkit errors"""

    category = 'error'
    exit_code = 1


class ConfigurationError(DSClusterError, ValueError):
    """Invalid or unknown configuration values"""

    category = 'config'
    exit_code = 2


class SceneIOError(DSClusterError, OSError):
    """File could not be read or written; message carries the path"""

    category = 'io'
    exit_code = 3

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")

    def __str__(self) -> str:
        return self.args[0] if self.args else self.path


class SizeMismatchError(DSClusterError, ValueError):
    """Two aligned inputs disagree on their point or frame count"""

    category = 'alignment'
    exit_code = 4


class UnknownClassError(DSClusterError, ValueError):
    """A class id is not declared by the semantic scheme"""

    category = 'alignment'
    exit_code = 4


class ShapeMismatchError(DSClusterError, ValueError):
    """Array shapes do not match the declared layer or feature widths"""

    category = 'shape'
    exit_code = 5


class ModelFormatError(DSClusterError):
    """Model file is missing, truncated or has an unknown layout"""

    category = 'model'
    exit_code = 6


class PlacementError(DSClusterError):
    """Synthetic instances could not be placed without overlap"""

    category = 'placement'
    exit_code = 7
