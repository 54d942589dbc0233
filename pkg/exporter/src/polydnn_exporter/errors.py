"""Exception types for the export pipeline.

Same convention as the consumer package: every error that can surface
through the command line carries an exit code.
"""


class ExporterError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ValidationError(ExporterError):
    """Inputs are structurally valid but inconsistent (shapes, ranges, sizes)."""

    exit_code = 2


class UnsupportedLayerError(ExporterError):
    """The framework model contains a layer the portable schema cannot express."""

    exit_code = 2


class ManifestError(ExporterError):
    """A manifest file violates the expected schema or value ranges."""

    exit_code = 2


class DataUnavailableError(ExporterError):
    """The dataset could neither be downloaded nor read from a local cache."""

    exit_code = 3
