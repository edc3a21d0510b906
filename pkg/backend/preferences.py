"""
Epstein-Zin preferences and their Fenchel-Legendre transform chain

The chain links four pairs of functions:

    f(c, u)  <->  F(c, nu)     aggregator and felicity
    U_T(c)   <->  V_T(d)       bequest utility and its conjugate
    F(c, nu) <->  G(d, nu)     felicity and dual felicity
    G(d, nu) <->  g(d, v)      dual felicity and dual aggregator

Every function accepts scalars or numpy arrays and returns the same shape.
Powers are evaluated as exp(k * log(base)) on strictly positive bases.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

import config
from backend.exceptions import DomainError

logger = logging.getLogger(__name__)


class Regime(str, Enum):
    """Parameter regimes that select the formula branches"""
    GAMMA_LT1 = 'GammaLT1'
    BOTH_GT1 = 'BothGT1'
    CRRA = 'CRRA'
    UNSUPPORTED = 'Unsupported'


@dataclass(frozen=True)
class EZPreference:
    """Epstein-Zin preference parameters

    Args:
        delta: discount rate (> 0)
        gamma: relative risk aversion (> 0, != 1)
        psi: elasticity of intertemporal substitution (> 0, != 1)
    """
    delta: float
    gamma: float
    psi: float

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError(f'delta must be positive, got {self.delta}')
        if not self.gamma > 0 or self.gamma == 1:
            raise DomainError(f'gamma must be positive and different from 1, got {self.gamma}')
        if not self.psi > 0 or self.psi == 1:
            raise DomainError(f'psi must be positive and different from 1, got {self.psi}')

        regime = self.regime()
        if regime is Regime.GAMMA_LT1 and not 0 < self.theta < 1:
            raise DomainError(f'theta={self.theta} outside (0, 1) for gamma < 1, gamma*psi > 1')
        if regime is Regime.BOTH_GT1 and not self.theta < 0:
            raise DomainError(f'theta={self.theta} not negative for gamma, psi > 1')

    @property
    def theta(self):
        return (1.0 - self.gamma) / (1.0 - 1.0 / self.psi)

    @property
    def delta_theta(self):
        """Lower end of the admissible discount-rate set"""
        return self.delta * self.theta

    @property
    def utility_sign(self):
        """+1 if gamma < 1, -1 if gamma > 1; sign * U >= 0 for admitted utilities"""
        return 1 if self.gamma < 1 else -1

    def regime(self):
        if abs(self.gamma * self.psi - 1.0) < config.CRRA_TOL:
            return Regime.CRRA
        if 0 < self.gamma < 1 and self.gamma * self.psi > 1:
            return Regime.GAMMA_LT1
        if self.gamma > 1 and self.psi > 1:
            return Regime.BOTH_GT1
        return Regime.UNSUPPORTED

    def is_crra(self):
        return self.regime() is Regime.CRRA

    def to_dict(self):
        return {
            'delta': self.delta,
            'gamma': self.gamma,
            'psi': self.psi,
            'theta': self.theta,
            'regime': self.regime().value,
        }


def _as_array(value):
    return np.asarray(value, dtype=float)


def _out(value):
    """Return a Python float for 0-d results, the array otherwise"""
    value = np.asarray(value)
    return float(value) if value.ndim == 0 else value


def _power(base, exponent):
    return np.exp(exponent * np.log(base))


def _require_positive(name, value):
    if np.any(~(value > 0)):
        raise DomainError(f'{name} must be strictly positive')


def _utility_base(p, u, name='u'):
    """(1 - gamma) * u, checked positive"""
    base = (1.0 - p.gamma) * _as_array(u)
    if np.any(~(base > 0)):
        raise DomainError(f'(1 - gamma) * {name} must be strictly positive')
    return base


def _felicity_base(p, nu):
    """(delta*theta - nu) / (theta - 1), checked positive"""
    if p.is_crra():
        raise DomainError('felicity is degenerate when gamma * psi = 1')
    base = (p.delta_theta - _as_array(nu)) / (p.theta - 1.0)
    if np.any(~(base > 0)):
        raise DomainError(f'nu must exceed delta*theta = {p.delta_theta}')
    return base


def aggregator_f(p, c, u):
    """Epstein-Zin aggregator f(c, u)"""
    c = _as_array(c)
    _require_positive('consumption', c)
    base = _utility_base(p, u)
    if p.is_crra():
        value = p.delta * _power(c, 1.0 - p.gamma) / (1.0 - p.gamma) - p.delta * _as_array(u)
        return _out(value)
    ratio = 1.0 - 1.0 / p.psi
    value = (p.delta * _power(c, ratio) / ratio * _power(base, 1.0 - 1.0 / p.theta)
             - p.delta_theta * _as_array(u))
    return _out(value)


def aggregator_fu(p, c, u):
    """Minus the utility derivative of the aggregator, -f_u(c, u)

    This is the candidate discount rate nu^c attached to a utility process.
    """
    c = _as_array(c)
    _require_positive('consumption', c)
    base = _utility_base(p, u)
    if p.is_crra():
        return _out(np.full(np.broadcast(c, base).shape, p.delta))
    value = (p.delta * (1.0 - p.theta) * _power(c, 1.0 - 1.0 / p.psi) * _power(base, -1.0 / p.theta)
             + p.delta_theta)
    return _out(value)


def aggregator_fc(p, c, u):
    """Consumption derivative of the aggregator, f_c(c, u)"""
    c = _as_array(c)
    _require_positive('consumption', c)
    base = _utility_base(p, u)
    if p.is_crra():
        return _out(p.delta * _power(c, -p.gamma) * np.ones_like(base))
    return _out(p.delta * _power(c, -1.0 / p.psi) * _power(base, 1.0 - 1.0 / p.theta))


def felicity_F(p, c, nu):
    """Felicity F(c, nu) = inf_u (f(c, u) + nu * u)"""
    c = _as_array(c)
    _require_positive('consumption', c)
    base = _felicity_base(p, nu)
    value = (_power(p.delta, p.theta) * _power(c, 1.0 - p.gamma) / (1.0 - p.gamma)
             * _power(base, 1.0 - p.theta))
    return _out(value)


def felicity_F_nunu(p, c, nu):
    """Second nu-derivative of the felicity; non-positive iff gamma * psi > 1"""
    c = _as_array(c)
    _require_positive('consumption', c)
    base = _felicity_base(p, nu)
    value = (_power(p.delta, p.theta) * p.psi / (1.0 - p.gamma * p.psi)
             * _power(c, 1.0 - p.gamma) * _power(base, -1.0 - p.theta))
    return _out(value)


def bequest_U(p, c):
    """Bequest utility U_T(c) = c^(1-gamma) / (1-gamma)"""
    c = _as_array(c)
    _require_positive('consumption', c)
    return _out(_power(c, 1.0 - p.gamma) / (1.0 - p.gamma))


def conjugate_V(p, d):
    """Conjugate of the bequest utility, V_T(d) = sup_c (U_T(c) - d c)"""
    d = _as_array(d)
    _require_positive('state price', d)
    return _out(p.gamma / (1.0 - p.gamma) * _power(d, (p.gamma - 1.0) / p.gamma))


def dual_G(p, d, nu):
    """Dual felicity G(d, nu) = sup_c (F(c, nu) - d c)"""
    d = _as_array(d)
    _require_positive('state price', d)
    base = _felicity_base(p, nu)
    value = (_power(p.delta, p.theta / p.gamma) * p.gamma / (1.0 - p.gamma)
             * _power(d, (p.gamma - 1.0) / p.gamma)
             * _power(base, (1.0 - p.theta) / p.gamma))
    return _out(value)


def dual_G_nunu(p, d, nu):
    """Second nu-derivative of the dual felicity; non-positive iff gamma * psi > 1"""
    d = _as_array(d)
    _require_positive('state price', d)
    base = _felicity_base(p, nu)
    value = (_power(p.delta, p.theta / p.gamma) / (p.gamma * (1.0 - p.gamma * p.psi))
             * _power(d, (p.gamma - 1.0) / p.gamma)
             * _power(base, (1.0 - p.theta) / p.gamma - 2.0))
    return _out(value)


def dual_g(p, d, v):
    """Dual aggregator g(d, v) = sup_nu (G(d, nu) - nu * v)"""
    d = _as_array(d)
    _require_positive('state price', d)
    base = _utility_base(p, v, name='v')
    if p.is_crra():
        value = (_power(p.delta, 1.0 / p.gamma) * p.gamma / (1.0 - p.gamma)
                 * _power(d, (p.gamma - 1.0) / p.gamma) - p.delta * _as_array(v))
        return _out(value)
    value = (_power(p.delta, p.psi) * _power(d, 1.0 - p.psi) / (p.psi - 1.0)
             * _power(base, 1.0 - p.gamma * p.psi / p.theta)
             - p.delta_theta * _as_array(v))
    return _out(value)


def dual_gv(p, d, v):
    """Minus the v-derivative of the dual aggregator, -g_v(d, v)"""
    d = _as_array(d)
    _require_positive('state price', d)
    base = _utility_base(p, v, name='v')
    if p.is_crra():
        return _out(np.full(np.broadcast(d, base).shape, p.delta))
    value = (_power(p.delta, p.psi) * (1.0 - p.theta) * _power(d, 1.0 - p.psi)
             * _power(base, -p.gamma * p.psi / p.theta) + p.delta_theta)
    return _out(value)
