import logging
from functools import wraps

from django.core.management.base import CommandError
from pydantic import ValidationError as PydanticValidationError

logger = logging.getLogger("fsod.errors")

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class FsodError(Exception):
    """
    Base exception for detector errors.

    Provides standardized error reporting with an error code, additional
    context data and the process exit code used by the management commands.
    """

    def __init__(self, message, code=None, data=None, exit_code=None):
        self.message = message
        self.code = code
        self.data = data or {}
        self.exit_code = exit_code
        super().__init__(message)


class ConfigurationError(FsodError):
    """Invalid configuration: bad config file, mismatched layer shapes."""

    def __init__(self, message="Invalid configuration", **kwargs):
        kwargs.setdefault("code", "configuration_error")
        kwargs.setdefault("exit_code", EXIT_VALIDATION)
        super().__init__(message, **kwargs)


class ValidationError(FsodError):
    """Validation error for invalid input data."""

    def __init__(self, message="Invalid data", **kwargs):
        kwargs.setdefault("code", "validation_error")
        kwargs.setdefault("exit_code", EXIT_VALIDATION)
        super().__init__(message, **kwargs)


class ShapeError(FsodError):
    """Tensor shape does not fit the operation."""

    def __init__(self, message="Shape mismatch", **kwargs):
        kwargs.setdefault("code", "shape_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class StateError(FsodError):
    """An operation was called without the state it depends on."""

    def __init__(self, message="Missing saved state", **kwargs):
        kwargs.setdefault("code", "state_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class NonFiniteError(FsodError):
    """A tensor operation produced NaN or Inf."""

    def __init__(self, message="Non-finite values", **kwargs):
        kwargs.setdefault("code", "non_finite")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class DegenerateVectorError(FsodError):
    """A distance was requested for a (near) zero or constant vector."""

    def __init__(self, message="Degenerate vector", argument=None, **kwargs):
        kwargs.setdefault("code", "degenerate_vector")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        self.argument = argument
        super().__init__(message, **kwargs)


class TrainingError(FsodError):
    """Parameter update failed; names the offending layer."""

    def __init__(self, message="Training error", layer=None, **kwargs):
        kwargs.setdefault("code", "training_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        self.layer = layer
        super().__init__(message, **kwargs)


class EpisodeAbortError(FsodError):
    """An episode produced a non-finite loss and was abandoned."""

    def __init__(self, message="Episode aborted", **kwargs):
        kwargs.setdefault("code", "episode_abort")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class SamplingError(FsodError):
    """The dataset cannot supply the requested episode."""

    def __init__(self, message="Insufficient class inventory", deficits=None, **kwargs):
        kwargs.setdefault("code", "sampling_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        self.deficits = deficits or {}
        super().__init__(message, **kwargs)


class RenderError(FsodError):
    """Scene objects could not be placed."""

    def __init__(self, message="Scene overcrowded", **kwargs):
        kwargs.setdefault("code", "render_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class CropError(FsodError):
    """Crop box is degenerate or outside the image."""

    def __init__(self, message="Degenerate crop box", **kwargs):
        kwargs.setdefault("code", "crop_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class CheckpointError(FsodError):
    """Checkpoint is unreadable or does not match the model."""

    def __init__(self, message="Checkpoint error", **kwargs):
        kwargs.setdefault("code", "checkpoint_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        super().__init__(message, **kwargs)


class ArtifactIOError(FsodError):
    """Reading or writing an artifact file failed."""

    def __init__(self, message="I/O error", path=None, **kwargs):
        kwargs.setdefault("code", "io_error")
        kwargs.setdefault("exit_code", EXIT_RUNTIME)
        self.path = str(path) if path is not None else None
        if self.path:
            message = f"{message}: {self.path}"
        super().__init__(message, **kwargs)


def format_pydantic_errors(exc):
    """Flatten a pydantic ValidationError into 'field: message' strings."""
    messages = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error.get("loc", ())) or "<root>"
        messages.append(f"{location}: {error.get('msg', 'invalid value')}")
    return messages


def command_exception_handler(func):
    """
    Decorator to standardize error handling in management commands.

    Converts FsodError and pydantic validation failures into CommandError
    with the exit code the CLI contract requires (1 validation, 2 runtime).
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except CommandError:
            raise
        except PydanticValidationError as e:
            fields = format_pydantic_errors(e)
            logger.info(f"Validation error in {func.__name__}: {fields}")
            raise CommandError(
                "Invalid configuration: " + "; ".join(fields),
                returncode=EXIT_VALIDATION,
            )
        except FsodError as e:
            exit_code = e.exit_code or EXIT_RUNTIME
            if exit_code == EXIT_VALIDATION:
                logger.info(f"Validation error in {func.__name__}: {e.message}")
            else:
                logger.error(f"{e.code} in {func.__name__}: {e.message}", extra={"data": e.data})
            raise CommandError(e.message, returncode=exit_code)
        except Exception as e:
            logger.exception(f"Unexpected error in {func.__name__}: {str(e)}")
            raise CommandError(f"Unexpected error: {str(e)}", returncode=EXIT_RUNTIME)

    return wrapper
