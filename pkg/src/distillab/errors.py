"""Exception hierarchy shared by all distillab modules."""


class DistillabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DistillabError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(DistillabError):
    """Non-finite values where finite ones are required."""


class GraphError(DistillabError):
    """Autodiff tape misuse (e.g. backward run twice on one graph)."""


class ArgumentError(DistillabError):
    """Invalid argument value outside shape/numeric concerns."""


class DegenerateInputError(DistillabError):
    """Input is structurally valid but degenerate (all-masked, zero matrix)."""


class InputTooShortError(DistillabError):
    """Sequence shorter than the minimum an operation can consume."""


class InfeasibleTargetError(DistillabError):
    """CTC target admits no alignment within the given frame count."""


class DepthError(DistillabError):
    """Teacher/student depth combination not supported by an init mode."""


class FormatError(DistillabError):
    """Malformed checkpoint manifest or payload."""


class ParseError(DistillabError):
    """Malformed text input (alignment/lexicon/transcript files)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingDiverged(DistillabError):
    """Loss became non-finite; the last good checkpoint was retained."""
