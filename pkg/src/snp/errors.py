"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input violated a documented precondition (shape, range, resolution)."""


class BackendError(RuntimeError):
    """A denoiser backend call failed; the message carries the sampling step."""


class BackendUnavailable(RuntimeError):
    """The requested backend cannot be constructed (missing package or weights)."""


class NonFiniteLatentError(FloatingPointError):
    def __init__(self, step_index: int):
        super().__init__(f"latent became non-finite at step {step_index}")
        self.step_index = step_index


class NumericalError(ArithmeticError):
    """A numerical routine failed to produce a trustworthy result."""
