"""Exception hierarchy shared by every subsystem."""


class MatrainError(Exception):
    """Base class; ``kind`` is the machine-readable tag written by the CLI."""

    kind = "error"


class ShapeError(MatrainError, ValueError):
    kind = "shape"


class ConvergenceError(MatrainError, ArithmeticError):
    kind = "convergence"

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class ConfigError(MatrainError, ValueError):
    kind = "config"


class UnknownModuleError(MatrainError, KeyError):
    """Module id not present in the network partition."""

    kind = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown key"


class AlignmentError(MatrainError, ValueError):
    kind = "alignment"


class StateError(MatrainError, RuntimeError):
    kind = "state"


class ProtectionError(MatrainError, ValueError):
    kind = "protection"


class NumericError(MatrainError, ArithmeticError):
    """Non-finite value during training.

    ``sample`` is the offending row of the batch when known and
    ``checkpoint`` the last parameter vector that produced finite losses.
    """

    kind = "numeric"

    def __init__(self, message, sample=None, checkpoint=None, epoch=None):
        super().__init__(message)
        self.sample = sample
        self.checkpoint = checkpoint
        self.epoch = epoch


class SpectrumError(MatrainError, ValueError):
    """Spectrum input outside the operation's domain (negative or all-zero)."""

    kind = "spectrum"


class OrderingError(MatrainError, ValueError):
    kind = "ordering"


class CompatibilityError(MatrainError, ValueError):
    """Run directories whose metric schemas cannot be compared."""

    kind = "compatibility"


class LockError(MatrainError, RuntimeError):
    """Output directory already owned by another run."""

    kind = "lock"
