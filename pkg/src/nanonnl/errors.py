"""Exception types shared across the library.

Everything raised on purpose derives from NnlError so callers can catch
library failures without swallowing programming errors.
"""


class NnlError(Exception):
    """Base class for all library errors."""


# --- array / kernel level ---

class ShapeMismatch(NnlError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidRange(NnlError):
    """A numeric range argument is empty or inverted (e.g. low >= high)."""


class KernelTooLarge(NnlError):
    """A convolution/pooling window exceeds the padded input extent."""


# --- graph level ---

class UnknownFunction(NnlError):
    """The requested function kind is not registered."""


class CycleDetected(NnlError):
    """Graph traversal found a cycle (defensive; the build API cannot create one)."""


class UninitializedInput(NnlError):
    """A leaf variable was read before any data was assigned to it."""


class ForwardNotRun(NnlError):
    """backward was called before forward populated the needed activations."""


class LabelOutOfRange(NnlError):
    """A classification label is outside [0, num_classes)."""


class DegenerateBatch(NnlError):
    """Batch statistics were requested over a single element."""


# --- parameters ---

class ShapeConflict(NnlError):
    """A registry entry already exists under this name with a different shape."""


# --- solver ---

class EmptyParameterSet(NnlError):
    """Solver setup received no parameters."""


class NotSetup(NnlError):
    """A solver operation was invoked before setup()."""


# --- communicator ---

class InvalidWorkerCount(NnlError):
    """Worker count must be >= 1."""


class ShapeMismatchAcrossRanks(NnlError):
    """Ranks entered a collective with differing buffer counts or shapes."""


class CollectiveTimeout(NnlError):
    """A rank failed to join a collective within the configured bound."""


class DivergedReplicas(NnlError):
    """Replica parameters differ after a step that must keep them in sync."""


# --- model container ---

class ValidationFailed(NnlError):
    """A model failed validation; carries the diagnostic list."""

    def __init__(self, diagnostics):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)


class IoError(NnlError):
    """An underlying filesystem operation failed."""


class BadMagic(NnlError):
    """The file is not an NNP archive or its binary member has a bad magic."""


class UnsupportedVersion(NnlError):
    """The archive declares a container version this library cannot read."""


class ParseError(NnlError):
    """A text or binary member is malformed; carries the offending location."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class ChecksumMismatch(NnlError):
    """An archive member failed its integrity check."""


class Unnormalizable(NnlError):
    """The model has a cycle or dangling reference that normalize cannot repair."""
