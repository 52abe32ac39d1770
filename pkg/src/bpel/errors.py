"""Exception hierarchy.

``ConfigError`` maps to CLI exit code 2; every ``NumericalError`` maps to 3.
"""


class BPELError(Exception):
    pass


class ConfigError(BPELError, ValueError):
    pass


class NumericalError(BPELError, ArithmeticError):
    pass


class MomentEvaluationError(NumericalError):
    def __init__(self, message, row=None, component=None):
        super().__init__(message)
        self.row = row
        self.component = component


class SolverError(NumericalError):
    def __init__(self, message, theta=None):
        if theta is not None:
            message = f"{message} (theta={list(map(float, theta))})"
        super().__init__(message)
        self.theta = theta


class EstimatorError(NumericalError):
    pass


class EmptySupportError(EstimatorError):
    pass


class SingularMatrixError(EstimatorError):
    def __init__(self, message, smallest_eigenvalue=None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class SamplerError(NumericalError):
    pass


class OptimizerError(NumericalError):
    pass
