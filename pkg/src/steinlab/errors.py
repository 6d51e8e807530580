"""Exception and warning types shared across the package."""


class SteinLabError(Exception):
    """Base class for all package errors."""


class DiagonalUndefined(SteinLabError, ValueError):
    """A kernel derivative was requested on the diagonal where it does not exist."""


class NotPositiveSemidefinite(SteinLabError, ValueError):
    """A Gram matrix has an eigenvalue below the clamping tolerance."""


class NonFinite(SteinLabError, FloatingPointError):
    """An integrator produced NaN or infinite coordinates."""


class Unsupported(SteinLabError, NotImplementedError):
    """The requested operation is not available for this configuration."""


class MassDefect(SteinLabError, ValueError):
    """A density perturbation does not integrate to zero."""


class NoConvergence(SteinLabError, RuntimeError):
    """An iteration did not reach its tolerance within the step budget."""


class ConfigInvalid(SteinLabError, ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class IoError(SteinLabError, OSError):
    """An artefact could not be read or written."""


class IllConditioned(UserWarning):
    """A projection basis was truncated because its Gram matrix is ill conditioned."""
