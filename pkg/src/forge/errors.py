"""Shared exception types, ordered roughly by pipeline stage."""


class ForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(ForgeError, ValueError):
    """Operand dimensions do not line up."""


class ParameterError(ForgeError, ValueError):
    """A configuration value is outside its allowed range."""


class DegenerateInputError(ForgeError, ValueError):
    """Input is numerically degenerate (e.g. zero-norm vector for cosine)."""


class InputError(ForgeError, ValueError):
    """Dataset or argument fails an operation's preconditions."""


class FormatError(ForgeError, ValueError):
    """A serialized artifact is corrupt, truncated, or version-mismatched."""


class IncompatibleModulesError(ForgeError, ValueError):
    """Plugin modules cannot be merged (layer set, rank, or scale mismatch)."""


class ValidationError(ForgeError, ValueError):
    """A contribution does not match its declared task."""


class IntegrityError(ForgeError, RuntimeError):
    """Stored object bytes no longer hash to their id."""


class ConflictError(ForgeError, RuntimeError):
    """Repository initialization target already exists."""


class NothingToMergeError(ForgeError, RuntimeError):
    """Merge requested with an empty contribution queue."""


class LockHeldError(ForgeError, RuntimeError):
    """The main-branch merge lock is held by another process."""


class UsageError(ForgeError, ValueError):
    """Bad command line or config file input."""
