"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. a near-zero vector fed to a normalizer)."""


class DegenerateGroupError(ValueError):
    """A loss was handed a group with an empty positive or negative set."""


class DataFormatError(ValueError):
    """A dataset file or record violates the expected format."""


class SamplingError(RuntimeError):
    """The sampler cannot satisfy a draw (e.g. a label with no candidates)."""


class GroupRejected(SamplingError):
    """A single anchor group could not be completed; the caller may retry with a new anchor."""


class ContractError(ValueError):
    """A caller violated an API precondition."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class EvaluationError(RuntimeError):
    """A function under numerical test produced a non-finite value."""


class TrainingAbort(RuntimeError):
    """Training stopped early; carries the report accumulated so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
