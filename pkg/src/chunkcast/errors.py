"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (see ``chunkcast.cli``).
"""


class ChunkcastError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ChunkcastError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ChunkcastError, ValueError):
    """An attention mask row has no allowed key."""


class NumericError(ChunkcastError, ArithmeticError):
    """A NaN or infinity appeared in a value or gradient."""


class ContractError(ChunkcastError, RuntimeError):
    """A caller violated an operation's precondition."""


class GraphConsumedError(ContractError):
    """``backward`` was called twice on the same recorded graph."""


class OracleInvalidError(ChunkcastError, RuntimeError):
    """A finite-difference oracle was given a non-deterministic function."""


class ConfigError(ChunkcastError, ValueError):
    """Invalid configuration (unknown keys, bad values, impossible setups)."""


class ConditioningError(ChunkcastError, ValueError):
    """Conditioning inputs do not line up with the latent frames."""


class StreamingOrderError(ChunkcastError, RuntimeError):
    """Chunks were generated out of order or the KV cache is missing a block."""


class InvariantViolation(ChunkcastError, RuntimeError):
    """A runtime invariant (e.g. in-order emission) was broken."""


class LateSwitchError(ChunkcastError, RuntimeError):
    """A mode switch targeted a chunk that was already emitted."""

    def __init__(self, message: str, earliest: int):
        super().__init__(message)
        self.earliest = earliest


class UndefinedCorrelationError(ChunkcastError, ValueError):
    """Pearson correlation requested for a constant sequence."""
