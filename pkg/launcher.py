import argparse
import importlib
import logging
import logging.handlers
import platform
import re
import sys
from pathlib import Path
from typing import Any

from colorama import Fore, Style, just_fix_windows_console
from dotenv import load_dotenv

from config import ConfigurationError, RuntimeConfig
from helpers.constants import EXIT_USAGE

__version__ = "1.0.0"

# Command modules loaded at startup, in help order
COMMAND_MODULES = ["gen", "pretrain", "train", "evaluate", "gradcheck", "ablate"]


# Define color codes for log levels
class ColoredFormatter(logging.Formatter):
    """Custom formatter that adds colors to log levels in console output"""

    COLORS = {
        "RESET": Style.RESET_ALL,
        "RED": Fore.RED,  # ERROR
        "YELLOW": Fore.YELLOW,  # WARNING
        "GREEN": Fore.GREEN,  # INFO
        "BLUE": Fore.CYAN,  # DEBUG
        "MAGENTA": Fore.MAGENTA,  # CRITICAL
        "GRAY": Fore.WHITE,  # Timestamps
        "BOLD": Style.BRIGHT,
        "CYAN": Fore.LIGHTCYAN_EX,  # dict keys
        "LIGHT_YELLOW": Fore.LIGHTYELLOW_EX,  # numbers
    }

    LEVEL_STYLES = [
        (logging.CRITICAL, "BOLD", "MAGENTA"),
        (logging.ERROR, "BOLD", "RED"),
        (logging.WARNING, "", "YELLOW"),
        (logging.INFO, "", "GREEN"),
        (logging.NOTSET, "", "BLUE"),
    ]

    def format(self, record: logging.LogRecord) -> str:
        format_orig = self._style._fmt
        for threshold, weight, color in self.LEVEL_STYLES:
            if record.levelno >= threshold:
                break
        c = self.COLORS
        self._style._fmt = (
            f"{c.get(weight, '')}{c[color]}%(levelname)s{c['RESET']} | "
            f"{c['GRAY']}%(asctime)s{c['RESET']} | %(message)s"
        )
        try:
            result = super().format(record)
        finally:
            self._style._fmt = format_orig

        # Highlight structured events on the message part
        if record.levelno == logging.INFO:
            parts = result.split("|", 2)
            if len(parts) == 3:
                parts[2] = " " + self._format_event(parts[2].strip())
                result = "|".join(parts)
        return result

    def _format_event(self, message: str) -> str:
        if not (message.startswith("{") and message.endswith("}")):
            return message
        c = self.COLORS
        message = re.sub(r"'([^']+)':", f"{c['CYAN']}\\1{c['RESET']}:", message)
        return re.sub(r": (-?\d+\.?\d*(?:e-?\d+)?)", f": {c['LIGHT_YELLOW']}\\1{c['RESET']}", message)


class ImportantLogFilter(logging.Filter):
    """Filter to keep per-step chatter out of the console in normal mode"""

    noise_events = ("checkpoint_saved", "report_written", "gradcheck_case", "dataset_read", "config_resolved")

    def filter(self, record: logging.LogRecord) -> bool:
        if record.levelno >= logging.WARNING:
            return True
        message = record.msg
        if isinstance(message, dict):
            return message.get("event") not in self.noise_events
        return True


def setup_logging(log_level: str = "normal", log_dir: str | Path = "logs") -> dict[str, dict[str, Any]]:
    """Configure console logging and one rotating log file per category"""
    logs_dir = Path(log_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)

    console_format = "%(levelname)s | %(asctime)s | %(message)s"
    file_format = "%(asctime)s | [%(levelname)s] | [%(name)s] | %(message)s"
    date_format = "%Y-%m-%d %H:%M:%S"

    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)

    # Set appropriate log level based on verbosity setting
    if log_level == "debug":
        root_logger.setLevel(logging.DEBUG)
        console_level = logging.DEBUG
        use_filter = False
    elif log_level == "verbose":
        root_logger.setLevel(logging.INFO)
        console_level = logging.INFO
        use_filter = False
    elif log_level == "quiet":
        root_logger.setLevel(logging.INFO)  # Still log everything to files
        console_level = logging.WARNING
        use_filter = True
    else:  # normal - default
        root_logger.setLevel(logging.INFO)
        console_level = logging.INFO
        use_filter = True

    # Results go to stdout, logs to stderr
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(ColoredFormatter(console_format, date_format))
    console.setLevel(console_level)
    if use_filter:
        console.addFilter(ImportantLogFilter())
    root_logger.addHandler(console)

    log_categories = {
        "lab": {
            "level": logging.DEBUG if log_level == "debug" else logging.INFO,
            "filename": "lab.log",
            "description": "Process lifecycle, configuration and checkpoints",
        },
        "training": {
            "level": logging.INFO,
            "filename": "training.log",
            "description": "Per-step loss breakdowns of pretraining and fine-tuning",
        },
        "data": {
            "level": logging.INFO,
            "filename": "data.log",
            "description": "Scene generation and dataset I/O",
        },
        "metrics": {
            "level": logging.DEBUG if log_level == "debug" else logging.INFO,
            "filename": "metrics.log",
            "description": "Evaluation runs and their counters",
        },
        "errors": {
            "level": logging.ERROR,
            "filename": "errors.log",
            "description": "All error messages across the lab",
        },
    }

    for category, config in log_categories.items():
        logger = logging.getLogger(category)
        logger.setLevel(config["level"])
        for handler in list(logger.handlers):
            logger.removeHandler(handler)

        handler = logging.handlers.RotatingFileHandler(
            logs_dir / config["filename"],
            maxBytes=5 * 1024 * 1024,  # 5 MB
            backupCount=5,
            encoding="utf-8",
        )
        handler.setFormatter(logging.Formatter(file_format, date_format))
        handler.setLevel(config["level"])
        logger.addHandler(handler)

        # Also add ERROR level logs to the errors log
        if category != "errors":
            error_handler = logging.handlers.RotatingFileHandler(
                logs_dir / "errors.log", maxBytes=5 * 1024 * 1024, backupCount=5, encoding="utf-8"
            )
            error_handler.setFormatter(logging.Formatter(file_format, date_format))
            error_handler.setLevel(logging.ERROR)
            logger.addHandler(error_handler)

    logging.getLogger("lab").debug(f"Logging system initialized with categories: {', '.join(log_categories)}")
    return log_categories


def print_banner() -> None:
    colors = ColoredFormatter.COLORS
    banner = f"""
{colors["BLUE"]} ███████╗ █████╗ ███╗   ███╗██╗██████╗  ██████╗ {colors["RESET"]}
{colors["BLUE"]} ██╔════╝██╔══██╗████╗ ████║██║██╔══██╗██╔═══██╗{colors["RESET"]}
{colors["GREEN"]} ███████╗███████║██╔████╔██║██║██████╔╝██║   ██║{colors["RESET"]}
{colors["GREEN"]} ╚════██║██╔══██║██║╚██╔╝██║██║██╔══██╗██║   ██║{colors["RESET"]}
{colors["YELLOW"]} ███████║██║  ██║██║ ╚═╝ ██║██║██║  ██║╚██████╔╝{colors["RESET"]}
{colors["YELLOW"]} ╚══════╝╚═╝  ╚═╝╚═╝     ╚═╝╚═╝╚═╝  ╚═╝ ╚═════╝ {colors["RESET"]}
    """
    print(banner, file=sys.stderr)
    print(
        f"{colors['BOLD']}{colors['BLUE']}SAMIRO lab{colors['RESET']} {colors['GREEN']}v{__version__}{colors['RESET']}",
        file=sys.stderr,
    )
    print(
        f"{colors['GRAY']}Running on {colors['BLUE']}Python {platform.python_version()}{colors['RESET']} | "
        f"{colors['YELLOW']}{platform.system()} {platform.release()}{colors['RESET']}",
        file=sys.stderr,
    )


def load_commands() -> dict[str, Any]:
    """Import every command module; each exposes COMMAND_METADATA, setup() and run()"""
    modules = {}
    for name in COMMAND_MODULES:
        module = importlib.import_module(f"commands.{name}")
        modules[module.COMMAND_METADATA["name"]] = module
    return modules


def build_parser(commands: dict[str, Any] | None = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samiro-lab",
        description="SAMIRO lab - feature-regularised transfer learning for lane detection at desk scale",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "--log-level",
        choices=["quiet", "normal", "verbose", "debug"],
        default=None,
        help="Logging verbosity (defaults to SAMIRO_LOG_LEVEL or normal)",
    )
    parser.add_argument(
        "--no-timestamp", action="store_true", help="Omit wall-clock and memory figures from run summaries"
    )
    parser.add_argument("--version", "-v", action="store_true", help="Show version information and exit")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    for module in (commands if commands is not None else load_commands()).values():
        module.setup(subparsers)
    return parser


def parse_arguments(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments"""
    return build_parser().parse_args(argv)


def display_error(message: str, exit_code: int | None = None) -> None:
    """Display an error message in a highly visible format"""
    colors = ColoredFormatter.COLORS
    border = f"{colors['RED']}{'═' * 80}{colors['RESET']}"
    print("\n" + border, file=sys.stderr)
    print(f"{colors['BOLD']}{colors['RED']} ERROR: {message}{colors['RESET']}", file=sys.stderr)
    print(border + "\n", file=sys.stderr)
    if exit_code is not None:
        sys.exit(exit_code)


def run(argv: list[str] | None = None) -> int:
    """Console entry point; returns the process exit code"""
    if sys.version_info < (3, 12):
        display_error("Python 3.12 or higher is required.")
        return EXIT_USAGE

    just_fix_windows_console()
    load_dotenv()

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; the lab reserves 2 for data errors
        return 0 if e.code in (0, None) else EXIT_USAGE

    if args.version:
        print(f"SAMIRO lab v{__version__}")
        return 0
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        runtime = RuntimeConfig.from_env(args)
    except ConfigurationError as e:
        display_error(f"Configuration error: {e}")
        return EXIT_USAGE

    if runtime.log_level in ("verbose", "debug"):
        print_banner()
    setup_logging(runtime.log_level, runtime.log_dir)
    logging.getLogger("lab").debug({"event": "command_start", "command": args.command})
    return args.handler(args, runtime)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
