"""
Error hierarchy for the TAGS detector toolkit
"""

# Exit codes used by the command line entry point
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class TagsError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = EXIT_RUNTIME


class ValidationError(TagsError, ValueError):
    """Input, file or configuration failed validation"""

    exit_code = EXIT_VALIDATION


class RuntimeFailure(TagsError, RuntimeError):
    """A valid run failed while executing"""

    exit_code = EXIT_RUNTIME


class ConfigError(ValidationError):
    """Bad configuration value or unknown configuration key"""

    def __init__(self, message: str, key: str = ""):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
