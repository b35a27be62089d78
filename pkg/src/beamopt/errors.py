"""Exception hierarchy shared by the solvers, recovery layers and file formats."""


class BeamoptError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(BeamoptError, ValueError):
    """An argument lies outside the domain of a formula."""


class ContractError(BeamoptError, ValueError):
    """A precondition on an input array was violated."""


class DegenerateChannelError(BeamoptError):
    """A user's effective channel gain is exactly zero."""


class ConvergenceError(BeamoptError):
    """An iterative method hit its iteration cap.

    ``last`` holds whatever the method had computed when it gave up.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class InfeasibleError(BeamoptError):
    """The requested SINR targets cannot be met."""


class FormatError(BeamoptError):
    """A dataset or checkpoint file is malformed."""
