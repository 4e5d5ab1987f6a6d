"""Exception hierarchy shared by every module of the testbed.

The CLI maps :class:`ConfigurationError` to exit code 2 and every other
:class:`TestbedError` to exit code 3.
"""

from typing import Dict, List, Optional


class TestbedError(Exception):
    """Base class for all errors raised by the testbed."""

    __test__ = False  # not a pytest test class


class ConfigurationError(TestbedError, ValueError):
    """Invalid configuration, attribute value or operation argument."""


class UnsupportedConfigurationError(ConfigurationError):
    """A valid configuration that the requested operation does not support."""


class ShapeMismatchError(ConfigurationError):
    """Two consecutive layers (or a tensor and a layer) disagree on shape."""


class NumericError(TestbedError, ArithmeticError):
    """A non-finite value appeared in an activation, loss or gradient."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class TrainingError(TestbedError):
    """Training diverged (loss became NaN/Inf)."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(TestbedError):
    """A file on disk does not follow its declared binary format."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class MissingArtifactError(TestbedError):
    """A downstream CLI step ran before the step that produces its inputs."""

    def __init__(self, artifact: str, producer: str):
        super().__init__(
            f"Missing artifact {artifact}: run the '{producer}' subcommand first"
        )
        self.artifact = artifact
        self.producer = producer


class AttackBatchError(TestbedError):
    """Aggregated per-example failures of a batch attack."""

    def __init__(self, errors: Dict[int, str]):
        lines: List[str] = [f"example {idx}: {msg}" for idx, msg in sorted(errors.items())]
        super().__init__(f"{len(errors)} example(s) failed:\n" + "\n".join(lines))
        self.errors = errors
