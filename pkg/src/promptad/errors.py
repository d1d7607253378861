"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/format problems exit 1,
dataset problems exit 2, numeric failures exit 3.
"""


class PromptADError(Exception):
    pass


class ShapeError(PromptADError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(PromptADError, ValueError):
    """A configuration value violates its constraints."""


class DatasetError(PromptADError, ValueError):
    """The dataset layout or contents are unusable."""


class FormatError(PromptADError, ValueError):
    """A binary file does not conform to its declared format."""


class NumericError(PromptADError, RuntimeError):
    """A computation produced or received an undefined numeric result."""


class SynthesisError(PromptADError, ValueError):
    """Anomaly synthesis could not satisfy its parameters."""


class MetricError(PromptADError, ValueError):
    """A metric is undefined for the given inputs."""
