"""Exception types raised across the package."""


class LayerGameError(Exception):
    """Base class for all package-specific errors."""


class CyclicGraphError(LayerGameError):
    """The network graph contains a directed cycle."""


class InconsistentAlignmentError(LayerGameError):
    """A stage assignment places a node before one of its inputs."""


class DimensionMismatchError(LayerGameError):
    """Tensor or parameter dimensions do not line up."""


class ExplosionGuardError(LayerGameError):
    """Alignment enumeration exceeded the configured cap."""


class NonFiniteStateError(LayerGameError):
    """A NaN or Inf appeared while propagating states."""


class NonFiniteValueError(LayerGameError):
    """A NaN or Inf appeared inside a backward recursion."""


class SingularCurvatureError(LayerGameError):
    """A curvature matrix could not be inverted even with the fallback."""


class SingularFactorError(LayerGameError):
    """A Kronecker factor was singular beyond the damped fallback."""


class SingularSystemError(LayerGameError):
    """A dense oracle solve hit a singular linear system."""


class UninitializedStateError(LayerGameError):
    """A preconditioner solve was requested before its state existed."""


class OutOfOrderUpdateError(LayerGameError):
    """Bandit update received without a matching sample."""


class NotAChainError(LayerGameError):
    """Fictitious-agent splitting requires a pure chain network."""


class ConfigError(LayerGameError):
    """Experiment configuration is malformed; message names the key."""


class BadMagicError(LayerGameError):
    """An IDX file starts with an unexpected magic number."""


class TruncatedFileError(LayerGameError):
    """An IDX file ends before the payload announced in its header."""


class LabelRangeError(LayerGameError):
    """A label file contains values outside the expected class range."""
