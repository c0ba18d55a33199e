"""Exception hierarchy shared across the pipeline.

Each class maps to a CLI exit code (see cli.EXIT_CODES): configuration
problems exit 2, data problems 3, training divergence 4, train/eval seed
contamination 5.
"""


class FlowcotError(Exception):
    """Base class for all flowcot errors."""


class ConfigError(FlowcotError):
    """Invalid or inconsistent configuration."""


class DataError(FlowcotError):
    """Bad or missing data artifacts."""


class PlacementError(DataError):
    """World generator could not place all sprites."""


class CapacityError(DataError):
    """Codebook would exceed its configured entry budget."""


class DecodeError(DataError):
    """Token grid refers to ids outside the codebook."""


class CodecError(DataError):
    """Flow field not encodable (non-finite values)."""


class LengthError(DataError):
    """Assembled token sequence exceeds the model's max_seq_len."""


class ParseError(DataError):
    """Malformed CSV/config input; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DivergenceError(FlowcotError):
    """Training loss produced a non-finite value."""


class ContaminationError(FlowcotError):
    """Evaluation seeds overlap the training manifest."""
