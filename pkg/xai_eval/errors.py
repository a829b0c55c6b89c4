"""Exception hierarchy and error-handling helpers shared by the CLI and the tool server"""

import functools
import inspect
import logging
from typing import Any, Awaitable, Callable, Dict, TypeVar, cast

from pydantic import ValidationError

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Awaitable[Any]])

EXIT_OK = 0
EXIT_COMPUTATION = 1
EXIT_USAGE = 2


class XAIEvalError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = EXIT_COMPUTATION


class UsageError(XAIEvalError):
    """Invalid configuration, arguments or parameter ranges"""

    exit_code = EXIT_USAGE


class DataError(XAIEvalError):
    """Missing files, undecodable images or malformed manifests"""

    exit_code = EXIT_USAGE


class ShapeError(XAIEvalError, ValueError):
    """Operand shapes are incompatible for an operation"""


class ComputationError(XAIEvalError):
    """A numerical procedure could not produce a valid result"""


class TrainingDivergedError(ComputationError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


class DegenerateMapError(ComputationError):
    """Saliency map carries no usable mass for the requested metric"""


class EmptyMaskError(ComputationError):
    """Ground-truth mask is empty (or full where a negative class is needed)"""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit code"""
    if isinstance(exc, XAIEvalError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, ValidationError)):
        return EXIT_USAGE
    return EXIT_COMPUTATION


def handle_errors(func: F) -> F:
    """
    Decorator for tool functions: failures come back as {"error": msg}

    Args:
        func: The async tool function to decorate

    Returns:
        Wrapped function that never lets an exception escape
    """
    @functools.wraps(func)
    async def wrapper(*args: Any, **kwargs: Any) -> Dict[str, Any]:
        try:
            return await func(*args, **kwargs)
        except XAIEvalError as e:
            logger.error(f"{func.__name__} failed: {e}")
            return {"error": str(e), "error_type": type(e).__name__, "exit_code": e.exit_code}
        except (FileNotFoundError, PermissionError) as e:
            logger.error(f"{func.__name__} failed: {e}")
            return {"error": f"IO error: {e}", "error_type": type(e).__name__, "exit_code": EXIT_USAGE}
        except ValidationError as e:
            logger.error(f"{func.__name__} got invalid settings: {e}")
            return {"error": f"Invalid settings: {e}", "error_type": "ValidationError", "exit_code": EXIT_USAGE}
        except Exception as e:
            logger.exception(f"{func.__name__} raised an unexpected error")
            return {"error": f"Unexpected error: {e}", "error_type": type(e).__name__, "exit_code": EXIT_COMPUTATION}

    if not inspect.iscoroutinefunction(func):
        raise TypeError("handle_errors expects an async function")
    return cast(F, wrapper)
