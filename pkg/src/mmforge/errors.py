"""Exception hierarchy shared by every mmforge module."""


class MMForgeError(Exception):
    """Base class for all mmforge errors."""


class EmptyInput(MMForgeError):
    pass


class ConflictingTransition(MMForgeError):
    pass


class DeadEnd(MMForgeError):
    pass


class UnknownObservation(MMForgeError):
    pass


class AlphabetMismatch(MMForgeError):
    pass


class ParseError(MMForgeError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ReplayMismatch(MMForgeError):
    pass


class IndexOutOfRange(MMForgeError):
    pass


class ShapeMismatch(MMForgeError, ValueError):
    pass


class NonFiniteGradient(MMForgeError, FloatingPointError):
    pass


class IdenticalCodes(MMForgeError):
    pass


class EvaluationFailure(MMForgeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class InvalidSpec(MMForgeError):
    pass


class StepAfterDone(MMForgeError, RuntimeError):
    pass


class EmptyDataset(MMForgeError):
    pass


class ExpertFailure(MMForgeError):
    pass
