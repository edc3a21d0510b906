"""
Report records for the Epstein-Zin duality toolkit
"""
import numpy as np


def _plain(value):
    """Convert numpy scalars and arrays into plain Python values"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, BaseModel):
        return value.to_dict()
    return value


class BaseModel:
    """Base report class with common functionality"""

    def __init__(self, **kwargs):
        for key, value in kwargs.items():
            setattr(self, key, value)

    def to_dict(self):
        """Convert report to a dictionary of plain values"""
        return {key: _plain(value) for key, value in self.__dict__.items()
                if not key.startswith('_')}

    def passed(self):
        """True if every flag of the report holds"""
        flags = getattr(self, 'flags', {})
        return all(bool(v) for v in flags.values())

    def failed_flags(self):
        return [name for name, ok in getattr(self, 'flags', {}).items() if not ok]


class RegimeReport(BaseModel):
    """Which duality regime a preference falls into"""

    def __init__(self, regime=None, applicable=False, label=None, message=None, **kwargs):
        super().__init__(**kwargs)
        self.regime = regime
        self.applicable = applicable
        self.label = label
        self.message = message
        self.flags = {'regime_applicable': applicable}


class CheckReport(BaseModel):
    """Model assumption checker outcome with per-condition results"""

    def __init__(self, name=None, applicable=True, accepted=False, conditions=None,
                 reasons=None, **kwargs):
        super().__init__(**kwargs)
        self.name = name
        self.applicable = applicable
        self.accepted = accepted
        self.conditions = conditions or {}
        self.reasons = reasons or []
        self.flags = {'applicable': applicable, 'accepted': accepted}


class DiagnosticReport(BaseModel):
    """Lyapunov diagnostic on a state grid"""

    def __init__(self, sup=None, argmax=None, bounded=False, values=None, grid=None,
                 inverse_x_coefficient=None, **kwargs):
        super().__init__(**kwargs)
        self.sup = sup
        self.argmax = argmax
        self.bounded = bounded
        self.values = values
        self.grid = grid
        self.inverse_x_coefficient = inverse_x_coefficient
        self.flags = {'lyapunov_bounded': bounded}

    def summary(self):
        return {'sup': self.sup, 'argmax': self.argmax, 'bounded': self.bounded,
                'inverse_x_coefficient': self.inverse_x_coefficient}


class BoundReport(BaseModel):
    """Monte Carlo check of the two-sided bounds on the value process"""

    def __init__(self, y0=None, lower=None, lower_se=None, lower_integrated=None, upper_hmax=None,
                 upper_logexp=None, upper_logexp_se=None, h_max=None, n_paths=None, **kwargs):
        super().__init__(**kwargs)
        self.y0 = y0
        self.lower = lower
        self.lower_se = lower_se
        self.lower_integrated = lower_integrated
        self.upper_hmax = upper_hmax
        self.upper_logexp = upper_logexp
        self.upper_logexp_se = upper_logexp_se
        self.h_max = h_max
        self.n_paths = n_paths
        self.flags = {}


class IdentityReport(BaseModel):
    """Pathwise discrepancies of the wealth and deflator identities"""

    def __init__(self, wealth_discrepancy=None, deflator_discrepancy=None,
                 ratio_discrepancy=None, dt=None, **kwargs):
        super().__init__(**kwargs)
        self.wealth_discrepancy = wealth_discrepancy
        self.deflator_discrepancy = deflator_discrepancy
        self.ratio_discrepancy = ratio_discrepancy
        self.dt = dt


class DualityReport(BaseModel):
    """End-to-end duality verification result; every estimate carries an SE"""

    def __init__(self, primal_estimate=None, primal_se=None, dual_estimate=None, dual_se=None,
                 analytic_value=None, y_star=None, gap=None, gap_se=None,
                 martingale_residual=None, martingale_se=None, gradient_residual=None,
                 q_mean=None, q_se=None, flags=None, **kwargs):
        super().__init__(**kwargs)
        self.primal_estimate = primal_estimate
        self.primal_se = primal_se
        self.dual_estimate = dual_estimate
        self.dual_se = dual_se
        self.analytic_value = analytic_value
        self.y_star = y_star
        self.gap = gap
        self.gap_se = gap_se
        self.martingale_residual = martingale_residual
        self.martingale_se = martingale_se
        self.gradient_residual = gradient_residual
        self.q_mean = q_mean
        self.q_se = q_se
        self.flags = flags or {}

    def attach(self, **artifacts):
        """Keep intermediate results of the run next to the report"""
        self._artifacts = artifacts

    @property
    def artifacts(self):
        return getattr(self, '_artifacts', {})

    def key_values(self):
        """Flat scalar key-value view for text and CSV output"""
        rows = {}
        for key, value in self.to_dict().items():
            if key == 'flags':
                rows.update({f'flag_{name}': bool(ok) for name, ok in value.items()})
            elif isinstance(value, (int, float, str, bool)) or value is None:
                rows[key] = value
        return rows
