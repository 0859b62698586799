"""Exception and warning types shared across the package."""


class SaginMapError(Exception):
    """Base class for all package-specific errors."""


class InputError(SaginMapError, ValueError):
    """Invalid argument values (non-finite coordinates, out-of-range inputs)."""


class ConfigError(SaginMapError, ValueError):
    """Invalid configuration (schedule bounds, unresolvable paths, bad schema)."""


class GenerationError(SaginMapError, RuntimeError):
    """Dataset or scene generation could not satisfy its contract (e.g. a
    class missing from the training split); usually fixed by reseeding."""


class TrainingFault(SaginMapError, RuntimeError):
    """Optimization diverged or produced non-finite losses."""


class NumericFault(SaginMapError, FloatingPointError):
    """Non-finite activations or other numeric breakdown; never masked."""


class ParseError(SaginMapError, ValueError):
    """Malformed file content. Carries the offending row/position when known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class CheckpointError(SaginMapError, ValueError):
    """Checkpoint file is unreadable or its architecture descriptor mismatches."""


class StageFault(SaginMapError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class ProvenanceWarning(UserWarning):
    """Imported artifact was produced under a different configuration."""
