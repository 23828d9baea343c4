"""
Exceptions and warnings raised by vipamin.

Each exception carries the exit code the command line returns for it.
"""


class VipaminError(Exception):
    exit_code = 1


class ParameterError(VipaminError, ValueError):
    """
    An argument violates a shape or range precondition.
    """
    exit_code = 2


class UndefinedInputError(ParameterError):
    pass


class ConfigError(VipaminError, ValueError):
    exit_code = 2


class DivergenceError(VipaminError, ArithmeticError):
    """
    The training loss became non-finite.

    :param step: optimizer step at which the loss was observed.
    :param record: the partial RunRecord collected up to that step, if any.
    """
    exit_code = 3

    def __init__(self, message, step=None, record=None):
        VipaminError.__init__(self, message)
        self.step = step
        self.record = record


class SvdConvergenceError(VipaminError, ArithmeticError):
    exit_code = 3


class ArchiveError(VipaminError, IOError):
    exit_code = 4


class DegenerateRowWarning(UserWarning):
    pass


class ConditioningWarning(UserWarning):
    pass
