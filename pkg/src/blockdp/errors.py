"""Exception types shared across the package."""


class BlockDPError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BlockDPError, ValueError):
    """Invalid configuration: bad field values, unknown keys, arity mismatches."""


class PanelError(BlockDPError, ValueError):
    """Malformed panel data. Messages reference 1-based CSV row numbers where known."""


class KernelError(BlockDPError, ValueError):
    """Transition kernel failed validation (row sums, negative mass, shape)."""


class ConvergenceError(BlockDPError, RuntimeError):
    """Iterative solver hit its iteration budget.

    Carries the last sup-norm gap so callers can report how far the solve got.
    """

    def __init__(self, message: str, last_gap: float | None = None):
        super().__init__(message)
        self.last_gap = last_gap


class SizeError(BlockDPError, ValueError):
    """Problem exceeds an explicit size cap (joint state space, memory guard)."""


class EstimationError(BlockDPError, RuntimeError):
    """Estimation failed: non-invertible Hessian, nesting violation, degenerate data."""


class BootstrapError(BlockDPError, RuntimeError):
    """Bootstrap could not produce usable standard errors."""


class SimulationError(BlockDPError, RuntimeError):
    """Forward simulation received inconsistent inputs."""
