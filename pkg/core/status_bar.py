"""
Console status bar for the TAGS toolkit
Module label, messages, errors and progress routed through logging
"""

import logging
import sys
from typing import Optional

LOG_FORMAT = "%(asctime)s %(levelname)-7s [%(module_label)s] %(message)s"
TIME_FORMAT = "%H:%M:%S"


class _ModuleLabelFilter(logging.Filter):
    """Fill in the module label for records that do not carry one"""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "module_label"):
            record.module_label = record.name.rsplit(".", 1)[-1].upper()
        return True


def configure_logging(verbose: bool = False, stream=None) -> logging.Logger:
    """Install the single stderr handler used by every command"""
    root = logging.getLogger("tags")
    root.handlers.clear()
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=TIME_FORMAT))
    handler.addFilter(_ModuleLabelFilter())
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
    return root


class StatusBar:
    """Status line with module indicator, message area and progress"""

    def __init__(self, module: str = "TAGS", logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger("tags.cli")
        self.module = module.upper()
        self.message = "Ready"
        self.error = False

    def set_module(self, module_name: str):
        """Set the current module name"""
        self.module = module_name.upper()

    def set_message(self, message: str, error: bool = False):
        """Set a status message"""
        self.message = message
        self.error = error
        extra = {"module_label": self.module}
        if error:
            self.logger.error(message, extra=extra)
        else:
            self.logger.info(message, extra=extra)

    def debug(self, message: str):
        """Log a message only shown in verbose mode"""
        self.logger.debug(message, extra={"module_label": self.module})

    def clear(self):
        """Clear the message"""
        self.message = "Ready"
        self.error = False

    def set_progress(self, value: float, text: Optional[str] = None):
        """Set progress indication"""
        if text:
            self.set_message(f"{text}: {value:.0%}")
        else:
            self.set_message(f"Progress: {value:.0%}")
