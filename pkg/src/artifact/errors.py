"""Exception hierarchy shared across the package."""


class ProtectionError(Exception):
    """Base class for all package errors."""


class DimensionError(ProtectionError, ValueError):
    """Tensor shape or spatial size violates an operation's contract."""


class ImageFormatError(ProtectionError, ValueError):
    """File or payload cannot be decoded as a supported format."""


class CheckpointFormatError(ImageFormatError):
    """Checkpoint magic, version, layout or content is invalid."""


class IncompatibilityError(ProtectionError, ValueError):
    """A well-formed checkpoint does not match the requested configuration."""


class StateError(ProtectionError, RuntimeError):
    """Model state is unusable (e.g. non-finite parameters)."""


class ContractError(ProtectionError, ValueError):
    """Caller violated a documented precondition."""


class TrainingAborted(ProtectionError, RuntimeError):
    """Training stopped because of a non-finite loss or gradient."""
