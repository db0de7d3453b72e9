"""Exception hierarchy shared by every latcomp module.

The CLI maps these onto process exit codes, so new errors should subclass
one of the three families below rather than ``Exception`` directly.
"""


class LatcompError(Exception):
    """Base class for all package errors."""


class ConfigError(LatcompError, ValueError):
    """Invalid configuration, preset or argument combination."""


class DataError(LatcompError, ValueError):
    """Bad, missing or inconsistent input data."""


class MissingVariableError(DataError, KeyError):
    def __init__(self, variable, where=""):
        self.variable = variable
        msg = f"variable {variable!r} not found"
        super().__init__(f"{msg} in {where}" if where else msg)

    def __str__(self):
        return self.args[0]


class ShapeError(DataError):
    """Array dimensions violate an operation's precondition."""


class StructuralError(DataError):
    """A patch set or archive is internally inconsistent."""


class IngestionError(DataError):
    """A container file failed validation while being read."""


class ChecksumError(DataError):
    """Stored bytes do not match their recorded CRC-32."""


class FingerprintError(DataError):
    """Model parameters do not belong to the requested architecture."""


class TrainingAborted(LatcompError, RuntimeError):
    """Raised when the loss becomes non-finite during training."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
