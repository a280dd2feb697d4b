"""Exception types raised across the package."""


class DomainError(ValueError):
    """An input lies outside the domain where a quantity is defined."""


class ContractError(ValueError):
    """Shapes or arguments do not satisfy an operation's contract."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.trace = trace


class InconsistencyError(RuntimeError):
    """A first-order condition cross-check failed at a claimed optimum."""


class IllPosedError(RuntimeError):
    """A linear system is singular or too badly conditioned to trust."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class PremiseError(ValueError):
    """A structural premise required by a closed-form result does not hold."""


class RankError(ValueError):
    """A design matrix is rank deficient."""


class SeparationError(RuntimeError):
    """Logit first stage diverged because of (quasi-)perfect separation."""
