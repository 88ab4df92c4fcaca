"""Exception hierarchy shared across the pipeline.

Each class carries the exit code the CLI maps it to, so stage failures
surface with stable, scriptable codes.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 2  # argparse's own code for unknown flags / bad usage
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_PLAN = 5
EXIT_SERVICE = 6


class PipelineError(Exception):
    """Base class for all pipeline failures."""

    exit_code = 1


class ConfigError(PipelineError):
    """Bad or missing configuration: flags, credentials, parameter ranges."""

    exit_code = EXIT_CONFIG


class DataError(PipelineError):
    """Invalid input data: malformed records, broken invariants, coverage gaps."""

    exit_code = EXIT_DATA


class ParseError(DataError):
    """A record or dialogue could not be parsed."""


class PlanError(PipelineError):
    """A batch plan that cannot be satisfied."""

    exit_code = EXIT_PLAN


class ServiceError(PipelineError):
    """A remote endpoint failed for good, retry budget included."""

    exit_code = EXIT_SERVICE


class AuthError(ServiceError):
    """The endpoint rejected the credential; never retried."""
