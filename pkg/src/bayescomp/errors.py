"""Exception types shared across the package."""


class InputError(ValueError):
    """Caller supplied arguments violating a documented precondition."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or failed to converge."""


class UnsupportedModelError(TypeError):
    """Operation requires a conjugate / catalogue model and got something else."""


class ConfigurationError(ValueError):
    """A kernel, flow, or experiment configuration is internally inconsistent."""


class DegenerateChainError(RuntimeError):
    """A diagnostic is undefined for the supplied chain(s), e.g. zero variance."""
