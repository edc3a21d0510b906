"""
Market models, derived coefficients and assumption checkers

A market is driven by a scalar state X with dynamics dX = b(X) dt + a(X) dW
and carries n risky assets with short rate r(X), excess returns mu(X),
volatility sigma(X) and correlation rho(X) between the asset noise W^rho and W.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

import config
from backend.exceptions import DomainError, ModelError
from backend.models import CheckReport, DiagnosticReport, RegimeReport
from backend.preferences import Regime

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    CONSTANT = 'constant'
    HESTON = 'heston'
    KIM_OMBERG = 'kim_omberg'


def _vector(name, value):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ModelError(f'{name} must be a finite vector')
    return arr


def _matrix(name, value, n):
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.shape != (n, n) or not np.all(np.isfinite(arr)):
        raise ModelError(f'{name} must be a finite {n}x{n} matrix, got shape {arr.shape}')
    return arr


def _check_rho(rho):
    norm2 = float(rho @ rho)
    if norm2 > 1.0 + config.CORRELATION_TOL:
        raise ModelError(f"rho'rho = {norm2} exceeds 1")


@dataclass
class ConstantParams:
    """Constant coefficients: r, mu (n), sigma (n x n), rho (n)"""
    r: float
    mu: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    x0: float = 0.0

    def __post_init__(self):
        self.mu = _vector('mu', self.mu)
        n = self.mu.size
        self.sigma = _matrix('sigma', self.sigma, n)
        self.rho = _vector('rho', self.rho)
        if self.rho.size != n:
            raise ModelError(f'rho must have {n} entries')
        _check_rho(self.rho)


@dataclass
class HestonParams:
    """Stochastic volatility: dX = b(ell - X) dt + a sqrt(X) dW

    sigma(x) = sigma * x**sigma_power (0.5 Heston, -0.5 inverse Heston) and
    mu(x) = sigma(x) lam sqrt(x); r(x) = r0 + r1 x.
    """
    b: float
    ell: float
    a: float
    r0: float
    r1: float
    lam: np.ndarray
    sigma: np.ndarray = None
    rho: np.ndarray = None
    sigma_power: float = 0.5
    x0: float = None

    def __post_init__(self):
        if self.b < 0 or self.ell < 0:
            raise ModelError('Heston requires b, ell >= 0')
        if not self.a > 0:
            raise ModelError('Heston requires a > 0')
        self.lam = _vector('lam', self.lam)
        n = self.lam.size
        self.sigma = np.eye(n) if self.sigma is None else _matrix('sigma', self.sigma, n)
        self.rho = np.zeros(n) if self.rho is None else _vector('rho', self.rho)
        if self.rho.size != n:
            raise ModelError(f'rho must have {n} entries')
        _check_rho(self.rho)
        if self.x0 is None:
            self.x0 = self.ell
        if not self.x0 > 0:
            raise ModelError('Heston initial state must be positive')

    @property
    def feller(self):
        return self.b * self.ell > 0.5 * self.a ** 2


@dataclass
class KimOmbergParams:
    """Linear diffusion: dX = -b X dt + a dW, mu(x) = sigma (lam0 + lam1 x)"""
    a: float
    b: float
    r0: float
    r1: float
    lam0: np.ndarray
    lam1: np.ndarray
    sigma: np.ndarray = None
    rho: np.ndarray = None
    x0: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ModelError('Kim-Omberg requires a, b > 0')
        self.lam0 = _vector('lam0', self.lam0)
        n = self.lam0.size
        self.lam1 = _vector('lam1', self.lam1)
        if self.lam1.size != n:
            raise ModelError(f'lam1 must have {n} entries')
        self.sigma = np.eye(n) if self.sigma is None else _matrix('sigma', self.sigma, n)
        self.rho = np.zeros(n) if self.rho is None else _vector('rho', self.rho)
        if self.rho.size != n:
            raise ModelError(f'rho must have {n} entries')
        _check_rho(self.rho)


class MarketModel:
    """Market coefficient functions of a scalar state

    All coefficient methods are vectorised: x of shape (m,) gives r, b, a of
    shape (m,), mu and rho of shape (m, n), sigma of shape (m, n, n).
    """

    def __init__(self, kind, params):
        self.kind = ModelKind(kind)
        self.params = params
        self._coefficients = {
            ModelKind.CONSTANT: self._constant_coefficients,
            ModelKind.HESTON: self._heston_coefficients,
            ModelKind.KIM_OMBERG: self._kim_omberg_coefficients,
        }[self.kind]
        self.n = int(params.sigma.shape[0])
        self.x0 = float(params.x0)
        if self.kind is ModelKind.HESTON:
            self.state_domain = (0.0, np.inf)
        else:
            self.state_domain = (-np.inf, np.inf)

    @classmethod
    def constant(cls, r, mu, sigma, rho, x0=0.0):
        return cls(ModelKind.CONSTANT, ConstantParams(r=r, mu=mu, sigma=sigma, rho=rho, x0=x0))

    @classmethod
    def heston(cls, params):
        return cls(ModelKind.HESTON, params)

    @classmethod
    def kim_omberg(cls, params):
        return cls(ModelKind.KIM_OMBERG, params)

    @property
    def is_constant(self):
        return self.kind is ModelKind.CONSTANT

    def regularize(self, x):
        """Map simulated states into the region where coefficients are evaluated"""
        x = np.asarray(x, dtype=float)
        if self.kind is ModelKind.HESTON:
            return np.maximum(x, config.HESTON_X_MIN)
        return x

    def coefficients(self, x):
        """Return (r, mu, sigma, rho, b, a) evaluated at the states x"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self._coefficients(x)

    def _constant_coefficients(self, x):
        cp = self.params
        m = x.size
        r = np.full(m, float(cp.r))
        mu = np.broadcast_to(cp.mu, (m, self.n)).copy()
        sigma = np.broadcast_to(cp.sigma, (m, self.n, self.n)).copy()
        rho = np.broadcast_to(cp.rho, (m, self.n)).copy()
        return r, mu, sigma, rho, np.zeros(m), np.zeros(m)

    def _heston_coefficients(self, x):
        hp = self.params
        if np.any(x <= 0):
            raise DomainError('Heston coefficients need a positive state')
        r = hp.r0 + hp.r1 * x
        sigma = hp.sigma[None, :, :] * (x ** hp.sigma_power)[:, None, None]
        lam = hp.lam[None, :] * np.sqrt(x)[:, None]
        mu = np.einsum('mij,mj->mi', sigma, lam)
        rho = np.broadcast_to(hp.rho, (x.size, self.n)).copy()
        b = hp.b * (hp.ell - x)
        a = hp.a * np.sqrt(x)
        return r, mu, sigma, rho, b, a

    def _kim_omberg_coefficients(self, x):
        kp = self.params
        m = x.size
        r = kp.r0 + kp.r1 * x
        lam = kp.lam0[None, :] + kp.lam1[None, :] * x[:, None]
        mu = lam @ kp.sigma.T
        sigma = np.broadcast_to(kp.sigma, (m, self.n, self.n)).copy()
        rho = np.broadcast_to(kp.rho, (m, self.n)).copy()
        return r, mu, sigma, rho, -kp.b * x, np.full(m, kp.a)

    def diagnostic_grid(self, nodes=None):
        """State grid covering the stationary mass and the tails"""
        nodes = config.PDE_SPACE_NODES if nodes is None else int(nodes)
        if self.kind is ModelKind.CONSTANT:
            return np.array([self.x0])
        if self.kind is ModelKind.HESTON:
            x_max = config.HESTON_X_MAX_FACTOR * self.params.ell
            if x_max <= config.HESTON_X_MIN:
                raise ModelError(f'Heston grid is empty: 10*ell = {x_max}')
            return np.geomspace(config.HESTON_X_MIN, x_max, nodes)
        half_width = config.OU_WIDTH_SDS * self.params.a / np.sqrt(2.0 * self.params.b)
        return np.linspace(-half_width, half_width, nodes)

    def describe(self):
        return {'kind': self.kind.value, 'n': self.n, 'x0': self.x0}


@dataclass
class DerivedCoefficients:
    """Market coefficients and their preference-dependent combinations on a grid"""
    x: np.ndarray
    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    b: np.ndarray
    a: np.ndarray
    Sigma: np.ndarray
    Sigma_inv: np.ndarray
    Theta: np.ndarray
    rho_perp: np.ndarray
    M: np.ndarray
    h: np.ndarray
    z_drift: np.ndarray
    gamma: float
    h_max: float = field(init=False)
    h_min: float = field(init=False)

    def __post_init__(self):
        self.h_max = float(np.max(self.h))
        self.h_min = float(np.min(self.h))

    @property
    def beta(self):
        """State drift under the measure change, b + ((1-gamma)/gamma) a rho' sigma' Sigma^-1 mu"""
        return self.b + self.a * self.z_drift

    def market_price_of_risk_sq(self):
        return np.einsum('mi,mij,mj->m', self.mu, self.Sigma_inv, self.mu)

    def to_frame(self):
        frame = {'x': self.x, 'r': self.r, 'h': self.h, 'M': self.M}
        n = self.Theta.shape[1]
        if n == 1:
            frame['Theta'] = self.Theta[:, 0, 0]
        else:
            for i in range(n):
                for j in range(n):
                    frame[f'Theta_{i + 1}{j + 1}'] = self.Theta[:, i, j]
        return pd.DataFrame(frame)


def complete_correlation(rho):
    """Principal square root rho_perp of I - rho rho'

    Returns an n x n symmetric positive semidefinite matrix with
    rho rho' + rho_perp rho_perp' = I.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if float(rho @ rho) > 1.0 + config.CORRELATION_TOL:
        raise ModelError(f"rho'rho = {float(rho @ rho)} exceeds 1")
    return complete_correlation_stack(rho[None, :])[0]


def complete_correlation_stack(rho):
    n = rho.shape[1]
    residual = np.eye(n)[None, :, :] - np.einsum('mi,mj->mij', rho, rho)
    eigval, eigvec = np.linalg.eigh(residual)
    root = np.sqrt(np.clip(eigval, 0.0, None))
    return np.einsum('mik,mk,mjk->mij', eigvec, root, eigvec)


def derive_coefficients(model, p, grid):
    """Tabulate Sigma, M, h, Theta and rho_perp on a state grid

    Args:
        model: MarketModel
        p: EZPreference
        grid: state nodes

    Returns:
        DerivedCoefficients
    """
    x = np.atleast_1d(np.asarray(grid, dtype=float))
    r, mu, sigma, rho, b, a = model.coefficients(x)
    Sigma = np.einsum('mik,mjk->mij', sigma, sigma)

    eig = np.linalg.eigvalsh(Sigma)
    singular = eig[:, 0] <= 1e-14 * np.maximum(eig[:, -1], 1e-300)
    if np.any(singular):
        j = int(np.argmax(singular))
        raise ModelError(f'Sigma is singular at node {j} (x={x[j]:.6g})')
    Sigma_inv = np.linalg.inv(Sigma)

    if np.any(np.einsum('mi,mi->m', rho, rho) > 1.0 + config.CORRELATION_TOL):
        raise ModelError("rho'rho exceeds 1 on the grid")

    Theta = np.einsum('mki,mkl,mlj->mij', sigma, Sigma_inv, sigma)
    rho_perp = complete_correlation_stack(rho)
    k = (1.0 - p.gamma) / p.gamma
    M = 1.0 + k * np.einsum('mi,mij,mj->m', rho, Theta, rho)
    mpr2 = np.einsum('mi,mij,mj->m', mu, Sigma_inv, mu)
    h = (1.0 - p.gamma) * r + 0.5 * k * mpr2
    z_drift = k * np.einsum('mi,mij,mjk,mk->m', mu, Sigma_inv, sigma, rho)

    lo, hi = (1.0 / p.gamma, 1.0) if p.gamma > 1 else (1.0, 1.0 / p.gamma)
    tol = 1e-12
    bad = (M < lo - tol) | (M > hi + tol)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise ModelError(f'M={M[j]:.6g} outside [{lo:.6g}, {hi:.6g}] at node {j} (x={x[j]:.6g})')

    coeffs = DerivedCoefficients(x=x, r=r, mu=mu, sigma=sigma, rho=rho, b=b, a=a,
                                 Sigma=Sigma, Sigma_inv=Sigma_inv, Theta=Theta,
                                 rho_perp=rho_perp, M=M, h=h, z_drift=z_drift, gamma=p.gamma)
    logger.debug('Derived coefficients on %d nodes: h in [%.6g, %.6g]', x.size, coeffs.h_min, coeffs.h_max)
    return coeffs


def check_regime_duality(p):
    """Classify a preference against the duality regimes"""
    regime = p.regime()
    if regime is Regime.GAMMA_LT1:
        return RegimeReport(regime=regime.value, applicable=True, label='(i)',
                            message='regime (i): 0 < gamma < 1 and gamma*psi > 1')
    if regime is Regime.BOTH_GT1:
        return RegimeReport(regime=regime.value, applicable=True, label='(ii)',
                            message='regime (ii): gamma > 1 and psi > 1')
    if regime is Regime.CRRA:
        return RegimeReport(regime=regime.value, applicable=False, label='CRRA',
                            message='CRRA: duality theorems inapplicable')
    return RegimeReport(regime=regime.value, applicable=False, label='unsupported',
                        message=f'unsupported: gamma={p.gamma}, psi={p.psi} outside both regimes')


def _inapplicable(name):
    return CheckReport(name=name, applicable=False, accepted=False,
                       reasons=['checker requires gamma > 1 and psi > 1'])


def check_heston(hp, p, grid=None):
    """Parameter restrictions for the stochastic volatility model

    Args:
        hp: HestonParams
        p: EZPreference
        grid: state nodes for the x-dependent conditions

    Returns:
        CheckReport with conditions feller, rate_floor and risk_premium
    """
    if not (p.gamma > 1 and p.psi > 1):
        return _inapplicable('heston')
    model = MarketModel.heston(hp)
    x = model.diagnostic_grid() if grid is None else np.asarray(grid, dtype=float)
    _, _, sigma, _, _, _ = model.coefficients(x)
    Sigma_inv = np.linalg.inv(np.einsum('mik,mjk->mij', sigma, sigma))
    Theta = np.einsum('mki,mkl,mlj->mij', sigma, Sigma_inv, sigma)
    quad = np.einsum('i,mij,j->m', hp.lam, Theta, hp.lam)

    conditions = {
        'feller': bool(hp.b * hp.ell > 0.5 * hp.a ** 2),
        'rate_floor': bool(np.all(hp.r1 + quad / (2.0 * p.gamma) >= 0)),
        'risk_premium': bool(hp.r1 > 0 or np.all(quad > 0)),
    }
    reasons = []
    if not conditions['feller']:
        reasons.append(f'Feller fails: b*ell = {hp.b * hp.ell:.6g} <= a^2/2 = {0.5 * hp.a ** 2:.6g}')
    if not conditions['rate_floor']:
        reasons.append("r1 + lam' Theta lam / (2 gamma) < 0 somewhere on the grid")
    if not conditions['risk_premium']:
        reasons.append("neither r1>0 nor lam' Theta lam>0")
    return CheckReport(name='heston', applicable=True, accepted=all(conditions.values()),
                       conditions=conditions, reasons=reasons)


def check_kim_omberg(kp, p):
    """Parameter restrictions for the linear diffusion model

    Returns:
        CheckReport accepting if restriction (i) or restriction (ii) holds
    """
    if not (p.gamma > 1 and p.psi > 1):
        return _inapplicable('kim_omberg')
    Sigma_inv = np.linalg.inv(kp.sigma @ kp.sigma.T)
    Theta = kp.sigma.T @ Sigma_inv @ kp.sigma
    drift = -kp.b + (1.0 - p.gamma) / p.gamma * kp.a * float(kp.lam1 @ Theta @ kp.rho)
    conditions = {
        'r1_zero': bool(kp.r1 == 0),
        'mean_reversion': bool(drift < 0),
        'risk_premium': bool(float(kp.lam1 @ Theta @ kp.lam1) > 0),
    }
    via_i = conditions['r1_zero'] and conditions['mean_reversion']
    via_ii = conditions['risk_premium']
    conditions['restriction_i'] = via_i
    conditions['restriction_ii'] = via_ii
    reasons = []
    if not (via_i or via_ii):
        reasons.append("neither (r1=0 and adjusted mean reversion < 0) nor lam1' Theta lam1 > 0")
    return CheckReport(name='kim_omberg', applicable=True, accepted=via_i or via_ii,
                       conditions=conditions, reasons=reasons)


def lyapunov_diagnostic(model, p, c_under, c_over, grid=None):
    """Evaluate the drift operator on phi(x) = -c_under log x + c_over x

    Reports the grid supremum and whether the values are non-increasing
    toward both ends of the sampled domain.
    """
    x = model.diagnostic_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(x <= 0):
        raise ModelError('Lyapunov diagnostic needs a positive state grid')
    coeffs = derive_coefficients(model, p, x)
    phi_x = -c_under / x + c_over
    phi_xx = c_under / x ** 2
    values = (0.5 * coeffs.a ** 2 * phi_xx + coeffs.beta * phi_x
              + 0.5 * coeffs.a ** 2 * coeffs.M * phi_x ** 2 + coeffs.h)

    finite = bool(np.all(np.isfinite(values)))
    tol = 1e-12 * max(1.0, float(np.max(np.abs(values)))) if finite else 0.0
    if x.size >= 2:
        bounded = finite and values[0] <= values[1] + tol and values[-1] <= values[-2] + tol
    else:
        bounded = finite

    inverse_coefficient = None
    if model.kind is ModelKind.HESTON:
        hp = model.params
        inverse_coefficient = float(0.5 * hp.a ** 2 * c_under + 0.5 * hp.a ** 2 * c_under ** 2 * coeffs.M[0]
                                    - hp.b * hp.ell * c_under)
    j = int(np.argmax(values)) if finite else 0
    return DiagnosticReport(sup=float(np.max(values)) if finite else float('inf'),
                            argmax=float(x[j]), bounded=bool(bounded), values=values, grid=x,
                            inverse_x_coefficient=inverse_coefficient)
