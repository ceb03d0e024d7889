import logging
import sys
import traceback
from functools import wraps

from colorama import Fore, Style

from config import ConfigurationError
from helpers.constants import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE
from helpers.exceptions import CheckFailure, CheckpointError, DataError, TensorError, TrainingError

COMMAND_METADATA = {
    "name": "error_handler",
    "description": "Maps exception families raised by commands to exit codes",
    "category": "System",
    "hidden": True,
}

# Checked in order; subclasses precede their bases
EXIT_CODES: list[tuple[type[Exception], int]] = [
    (ConfigurationError, EXIT_USAGE),
    (CheckFailure, EXIT_CHECK),
    (DataError, EXIT_DATA),
    (CheckpointError, EXIT_DATA),
    (TrainingError, EXIT_DATA),
    (TensorError, EXIT_DATA),
]


def exit_code_for(error: BaseException) -> int:
    for family, code in EXIT_CODES:
        if isinstance(error, family):
            return code
    return EXIT_USAGE


def report_error(message: str) -> None:
    print(f"{Style.BRIGHT}{Fore.RED}error:{Style.RESET_ALL} {message}", file=sys.stderr)


def handle_errors(func):
    """Run a command body and translate what it raises into an exit code."""

    @wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            result = func(*args, **kwargs)
        except CheckFailure as e:
            report_error(str(e))
            for failure in e.failures:
                print(f"  {failure}", file=sys.stderr)
            return EXIT_CHECK
        except (ConfigurationError, DataError, CheckpointError, TrainingError, TensorError) as e:
            logging.getLogger("errors").error(
                {"event": f"Error in {func.__module__}", "error": str(e), "type": type(e).__name__, "level": "error"}
            )
            report_error(str(e))
            return exit_code_for(e)
        except KeyboardInterrupt:
            report_error("interrupted")
            return EXIT_USAGE
        except Exception as e:
            # Log only unexpected errors with their traceback
            logging.getLogger("errors").error(
                {
                    "event": f"Unexpected error in {func.__module__}",
                    "error": str(e),
                    "traceback": traceback.format_exc(),
                    "level": "error",
                }
            )
            report_error(f"unexpected {type(e).__name__}: {e}")
            return EXIT_USAGE
        return EXIT_OK if result is None else result

    return wrapper
