"""Exception types shared across the package.

Every error that can surface through the command line carries an exit code so
the CLI can map failures without inspecting messages.  Library callers catch
the types directly.
"""


class PolyDnnError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ModelParseError(PolyDnnError):
    """A model or dataset file violates the expected schema."""

    exit_code = 2


class ValidationError(PolyDnnError):
    """Inputs are structurally valid but inconsistent (shapes, ranges, modes)."""

    exit_code = 2


class UnsupportedStructureError(PolyDnnError):
    """The requested transformation does not apply to this model structure."""

    exit_code = 2


class ConditioningError(PolyDnnError):
    """A basis conversion lost too much accuracy to be trusted."""

    exit_code = 2


class ExpansionTooLargeError(PolyDnnError):
    """Symbolic expansion would exceed the configured term budget."""

    exit_code = 3


class FieldOverflowError(PolyDnnError):
    """A fixed-point value falls outside the range the field can represent."""

    exit_code = 4


class FingerprintMismatchError(PolyDnnError):
    """Share files disagree about which program they belong to."""

    exit_code = 5


class ScaleMismatchError(PolyDnnError):
    """Share files disagree about the fixed-point scale of their payload."""

    exit_code = 5


class MissingRandomnessError(PolyDnnError):
    """A party asked for correlated randomness the dealer never issued."""

    exit_code = 5
