from typing import Any, Dict, Optional

from loguru import logger

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CHECK_FAILED = 3


class MetaPixError(Exception):
    """Base exception class for MetaPix."""
    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        exit_code: int = EXIT_FAILURE,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.exit_code = exit_code
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary format."""
        return {
            "error": {
                "code": self.error_code,
                "message": self.message,
                "details": self.details,
            }
        }


class ConfigError(MetaPixError):
    """Raised when a run configuration or an override is invalid."""
    def __init__(
        self,
        message: str = "Invalid configuration",
        error_code: str = "CONFIG_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message=message,
            error_code=error_code,
            exit_code=EXIT_USAGE,
            details=details
        )


class ShapeError(MetaPixError):
    """Raised when a primitive or network receives incompatible shapes."""
    def __init__(
        self,
        message: str = "Shape mismatch",
        error_code: str = "SHAPE_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message=message, error_code=error_code, details=details)


class GraphError(MetaPixError):
    """Raised on misuse of a computation graph (inactive, released, non-scalar output)."""
    def __init__(
        self,
        message: str = "Computation graph error",
        error_code: str = "GRAPH_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message=message, error_code=error_code, details=details)


class LossError(MetaPixError):
    """Raised when a loss cannot be formed, e.g. every pixel is ignored."""
    def __init__(
        self,
        message: str = "Loss error",
        error_code: str = "LOSS_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message=message, error_code=error_code, details=details)


class DataError(MetaPixError):
    """Raised when dataset files are missing, corrupt or out of range."""
    def __init__(
        self,
        message: str = "Dataset error",
        error_code: str = "DATA_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message=message, error_code=error_code, details=details)


class CheckpointError(MetaPixError):
    """Raised when a checkpoint cannot be written or read."""
    def __init__(
        self,
        message: str = "Checkpoint operation failed",
        error_code: str = "CHECKPOINT_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message=message, error_code=error_code, details=details)


class NonFiniteError(MetaPixError):
    """Raised when a value that must be finite is not."""
    def __init__(
        self,
        message: str = "Non-finite value",
        error_code: str = "NON_FINITE",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message=message, error_code=error_code, details=details)


class GradcheckFailed(MetaPixError):
    """Raised when a finite-difference certification does not pass."""
    def __init__(
        self,
        message: str = "Gradient check failed",
        error_code: str = "GRADCHECK_FAILED",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message=message,
            error_code=error_code,
            exit_code=EXIT_CHECK_FAILED,
            details=details
        )


def handle_exception(error: Exception) -> int:
    """
    Central exception handler for the command line.
    Logs the error and returns the process exit status.
    """
    if isinstance(error, MetaPixError):
        logger.bind(payload=error.to_dict()).error(
            f"{error.__class__.__name__}: {error.message}"
        )
        return error.exit_code

    if isinstance(error, KeyboardInterrupt):
        logger.warning("Interrupted")
        return EXIT_FAILURE

    # Handle unexpected errors
    logger.exception("Unexpected error occurred")
    return EXIT_FAILURE
