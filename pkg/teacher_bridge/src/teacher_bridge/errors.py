"""Errors raised by the bridge tools."""


class BridgeError(Exception):
    """Base class for deliberate errors."""


class UsageError(BridgeError):
    """Bad command-line arguments (exit code 2)."""


class NoFramesToMatchError(BridgeError):
    """Synchronization got an empty camera timestamp list."""


class ShapeMismatchError(BridgeError):
    """Mask and image dimensions disagree."""


class ModelUnavailableError(BridgeError):
    """The requested pretrained model cannot be loaded."""
