"""Unit tests for the launcher module."""

import logging
import os
import sys
import tempfile
import unittest
from unittest.mock import patch

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../..")))

import pytest

import launcher


@pytest.mark.unit
class TestLauncher(unittest.TestCase):
    """Test cases for launcher.py functionality."""

    def test_parse_arguments_defaults(self):
        """Test argument parser default values."""
        with patch("sys.argv", ["launcher.py", "gradcheck"]):
            args = launcher.parse_arguments()
            self.assertEqual(args.command, "gradcheck")
            self.assertIsNone(args.log_level)
            self.assertFalse(args.no_timestamp)
            self.assertFalse(args.version)
            self.assertEqual(args.tolerance, 1e-4)
            self.assertEqual(args.seed, 0)

    def test_parse_arguments_custom(self):
        """Test argument parser with custom values."""
        with patch(
            "sys.argv",
            [
                "launcher.py",
                "--log-level",
                "verbose",
                "--no-timestamp",
                "train",
                "--data",
                "d",
                "--out",
                "o",
                "--seed",
                "3",
            ],
        ):
            args = launcher.parse_arguments()
            self.assertEqual(args.log_level, "verbose")
            self.assertTrue(args.no_timestamp)
            self.assertEqual(args.command, "train")
            self.assertEqual(args.data, "d")
            self.assertEqual(args.seed, 3)
            self.assertIsNone(args.oracle)

    def test_eval_alias(self):
        """Test that eval is accepted as a short form of evaluate."""
        args = launcher.parse_arguments(["eval", "--pred", "p", "--gt", "g"])
        self.assertEqual(args.format, "culane")
        self.assertEqual(args.iou, 0.5)
        self.assertIsNone(args.width)

    def test_every_command_is_registered(self):
        """Test that each command module contributes a subcommand."""
        commands = launcher.load_commands()
        self.assertEqual(sorted(commands), sorted(["gen", "pretrain", "train", "evaluate", "gradcheck", "ablate"]))

    def test_log_setup(self):
        """Test that log setup works correctly."""
        with tempfile.TemporaryDirectory() as log_dir:
            with patch("logging.getLogger"), patch("logging.handlers.RotatingFileHandler"):
                categories = launcher.setup_logging("normal", log_dir)
            self.assertIsNotNone(categories)
            self.assertIn("lab", categories)
            self.assertIn("training", categories)
            self.assertIn("data", categories)
            self.assertIn("metrics", categories)
            self.assertIn("errors", categories)

    def test_log_files_are_created(self):
        """Test that each category writes to its own file."""
        with tempfile.TemporaryDirectory() as log_dir:
            launcher.setup_logging("quiet", log_dir)
            logging.getLogger("training").info({"event": "train_step", "step": 1})
            for handler in logging.getLogger("training").handlers:
                handler.flush()
            with open(os.path.join(log_dir, "training.log"), encoding="utf-8") as handle:
                self.assertIn("train_step", handle.read())
            for name in ("lab", "training", "data", "metrics", "errors"):
                for handler in list(logging.getLogger(name).handlers):
                    logging.getLogger(name).removeHandler(handler)
                    handler.close()


@pytest.mark.unit
class TestConsoleFilter(unittest.TestCase):
    def record(self, msg, level=logging.INFO):
        return logging.LogRecord("lab", level, __file__, 1, msg, None, None)

    def test_noise_events_dropped(self):
        noise = launcher.ImportantLogFilter()
        self.assertFalse(noise.filter(self.record({"event": "checkpoint_saved"})))
        self.assertTrue(noise.filter(self.record({"event": "train_done"})))
        self.assertTrue(noise.filter(self.record("plain text")))

    def test_warnings_always_pass(self):
        noise = launcher.ImportantLogFilter()
        self.assertTrue(noise.filter(self.record({"event": "checkpoint_saved"}, logging.WARNING)))

    def test_event_highlighting_keeps_text(self):
        formatter = launcher.ColoredFormatter("%(levelname)s | %(asctime)s | %(message)s")
        text = formatter.format(self.record({"event": "train_step", "step": 4}))
        self.assertIn("event", text)
        self.assertIn("train_step", text)
        self.assertIn("4", text)


@pytest.mark.unit
class TestRun(unittest.TestCase):
    def test_version(self):
        with patch("builtins.print") as mock_print:
            self.assertEqual(launcher.run(["--version"]), 0)
        mock_print.assert_called_once_with(f"SAMIRO lab v{launcher.__version__}")

    def test_missing_command_is_usage_error(self):
        self.assertEqual(launcher.run([]), 1)

    def test_bad_flag_is_usage_error(self):
        self.assertEqual(launcher.run(["gen", "--no-such-flag"]), 1)

    def test_bad_log_level_from_environment(self):
        with patch.dict("os.environ", {"SAMIRO_LOG_LEVEL": "loud"}), patch("launcher.display_error") as shown:
            self.assertEqual(launcher.run(["gradcheck"]), 1)
        shown.assert_called_once()


if __name__ == "__main__":
    unittest.main()
