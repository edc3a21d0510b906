"""
Exception hierarchy for the Epstein-Zin duality toolkit
"""


class EZDualityError(Exception):
    """Base class for all toolkit errors"""


class DomainError(EZDualityError, ValueError):
    """An argument lies outside the domain of a closed-form expression"""


class ModelError(EZDualityError):
    """Market model parameters are invalid or fail an assumption gate"""


class AssumptionError(ModelError):
    """Preference regime or model checker rejects the parameters"""


class ConvergenceError(EZDualityError):
    """An iterative solver did not reach its tolerance"""


class NumericalError(EZDualityError):
    """A non-finite value appeared in a policy, loading or solution"""


class ValuationError(EZDualityError):
    """Backward Monte Carlo valuation failed at a time node"""


class ConfigurationError(EZDualityError):
    """Malformed or incomplete run configuration"""

    def __init__(self, message, lineno=0):
        super().__init__(f'line {lineno}: {message}')
        self.lineno = lineno
