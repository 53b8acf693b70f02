"""Exception types shared across advcast modules."""


class AdvcastError(Exception):
    """Base class for all advcast errors."""


class DimensionMismatch(AdvcastError):
    pass


class NotPositiveDefinite(AdvcastError):
    pass


class NonSymmetric(AdvcastError):
    pass


class NonFiniteEvaluation(AdvcastError):
    pass


class NonFiniteGradient(AdvcastError):
    pass


class Infeasible(AdvcastError):
    pass


class MaxIterations(AdvcastError):
    pass


class SingularReducedSystem(AdvcastError):
    pass


class InvalidParams(AdvcastError):
    pass


class GeneratorRequired(AdvcastError):
    pass


class MissingChannels(AdvcastError):
    pass


class EmptyDataset(AdvcastError):
    pass


class ParseError(AdvcastError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimsHeaderMismatch(AdvcastError):
    pass


class AllZeroDifferences(AdvcastError):
    pass


class LengthMismatch(AdvcastError):
    pass


class NonPositiveBaseline(AdvcastError):
    pass


class ConfigInvalid(AdvcastError):
    pass


class MissingInput(AdvcastError):
    pass


class WeaklyActiveWarning(UserWarning):
    """A constraint has both tiny slack and tiny dual; the derivative of the
    solution map is a subgradient choice there."""


class RoundCapWarning(UserWarning):
    """Game training hit the round cap before meeting the convergence test."""
