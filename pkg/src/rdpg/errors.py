"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes, widths, names or settings that do not fit together."""


class UsageError(RuntimeError):
    """An operation was called in a state where it is not allowed."""


class BufferNotReady(RuntimeError):
    """The replay buffer holds no episode long enough to sample from."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a loss or gradient.

    ``diagnostics`` carries whatever the raising site knew (counts, norms,
    parameter names) so the caller can log it before halting.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
