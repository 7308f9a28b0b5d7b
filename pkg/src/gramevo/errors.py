"""Exception hierarchy shared across the package."""


class GramevoError(Exception):
    """Base class for all errors raised by this package."""


class GrammarParseError(GramevoError):
    """Grammar file is not well-formed (bad JSON or bad structure)."""


class GrammarValidationError(GramevoError):
    """Grammar violates a structural invariant (undefined nonterminal, ...)."""


class SamplingExhaustedError(GramevoError):
    """No production of a required nonterminal fits in the remaining depth budget."""


class TreeValidationError(GramevoError):
    """A derivation tree is inconsistent with its grammar."""


class ShapeError(GramevoError):
    """Tensor shape inference failed; the architecture is invalid."""


class ParseError(GramevoError):
    """An architecture string could not be parsed."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class SchemaError(GramevoError):
    """Feature schemas collide or do not match."""


class NotApplicableError(GramevoError):
    """Requested augmentation has no applicable site in the tree."""


class DegenerateDataError(GramevoError):
    """Rank correlation is undefined (one of the inputs is all ties)."""


class DataError(GramevoError):
    """Training or dataset rows violate their invariants."""


class LookupMissError(GramevoError):
    """Replay evaluator has no entry for the requested architecture."""


class EvaluatorError(GramevoError):
    """External evaluation command failed or produced garbage."""


class ConfigError(GramevoError):
    """A run configuration is invalid; message names the offending field."""


class BridgeError(GramevoError):
    """Base class for external-surrogate bridge failures."""


class ProtocolError(BridgeError):
    """The worker sent a malformed or contract-violating frame."""


class WorkerFailure(BridgeError):
    """The worker replied with an explicit {"ok": false} error frame."""


class WorkerCrashError(BridgeError):
    """The worker process died; carries captured stderr diagnostics."""

    def __init__(self, message, stderr_tail=""):
        if stderr_tail:
            message = f"{message}\n--- worker stderr ---\n{stderr_tail}"
        super().__init__(message)
        self.stderr_tail = stderr_tail


class BridgeTimeoutError(BridgeError):
    """The worker did not answer within the configured timeout."""
