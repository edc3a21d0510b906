"""
Numerical Fenchel-Legendre oracles for the preference transform chain

Each oracle optimises on a log-spaced grid and refines the best bracket
with a bounded Brent search in log coordinates. The conjugacy suite compares
the oracles with the closed forms of backend.preferences.
"""
import logging

import numpy as np
from scipy.optimize import minimize_scalar

import config
from backend.exceptions import AssumptionError
from backend.models import BaseModel
from backend.preferences import (Regime, aggregator_f, bequest_U, conjugate_V, dual_G, dual_g,
                                 felicity_F)

logger = logging.getLogger(__name__)

GRID_POINTS = 1201
NU_OFFSETS = (1e-8, 1e3)
LEVEL_RANGE = (1e-6, 1e6)


def log_grid_extremum(objective, lo, hi, maximize=True, points=GRID_POINTS, label='conjugate'):
    """Extremum of objective(s) over s in [lo, hi] with s > 0

    Args:
        objective: vectorised callable
        lo, hi: positive search range
        maximize: False searches the infimum

    Returns:
        (value, argument, on_edge)
    """
    sign = 1.0 if maximize else -1.0
    grid = np.geomspace(lo, hi, points)
    values = sign * np.asarray(objective(grid), dtype=float)
    values = np.where(np.isfinite(values), values, -np.inf)
    j = int(np.argmax(values))
    on_edge = j in (0, points - 1)
    if on_edge:
        logger.warning('%s optimum on the grid edge at %.6g', label, grid[j])
    a = np.log(grid[max(j - 1, 0)])
    b = np.log(grid[min(j + 1, points - 1)])
    result = minimize_scalar(lambda ls: -sign * float(objective(np.exp(ls))), bounds=(a, b),
                             method='bounded', options={'xatol': 1e-12})
    if -result.fun > values[j]:
        return sign * -result.fun, float(np.exp(result.x)), on_edge
    return sign * values[j], float(grid[j]), on_edge


def numeric_f(p, c, u):
    """sup over nu > delta theta of F(c, nu) - nu u"""
    return log_grid_extremum(lambda s: felicity_F(p, c, p.delta_theta + s) - (p.delta_theta + s) * u,
                             *NU_OFFSETS, label='f')[0]


def numeric_F(p, c, nu):
    """inf over (1-gamma) u > 0 of f(c, u) + nu u"""
    sign = p.utility_sign
    return log_grid_extremum(lambda s: aggregator_f(p, c, sign * s) + nu * sign * s,
                             *LEVEL_RANGE, maximize=False, label='F')[0]


def numeric_V(p, d):
    """sup over c > 0 of U_T(c) - d c"""
    return log_grid_extremum(lambda c: bequest_U(p, c) - d * c, *LEVEL_RANGE, label='V_T')[0]


def numeric_G(p, d, nu):
    """sup over c > 0 of F(c, nu) - d c"""
    return log_grid_extremum(lambda c: felicity_F(p, c, nu) - d * c, *LEVEL_RANGE, label='G')[0]


def numeric_g(p, d, v):
    """sup over nu > delta theta of G(d, nu) - nu v"""
    return log_grid_extremum(lambda s: dual_G(p, d, p.delta_theta + s) - (p.delta_theta + s) * v,
                             *NU_OFFSETS, label='g')[0]


class ConjugacyReport(BaseModel):
    """Largest relative residual of each closed form against its numerical oracle"""

    def __init__(self, residuals=None, samples=None, tolerance=None, **kwargs):
        super().__init__(**kwargs)
        self.residuals = residuals or {}
        self.samples = samples
        self.tolerance = tolerance
        self.flags = {name: bool(value <= tolerance) for name, value in self.residuals.items()}

    def rows(self):
        return [{'transform': name, 'max_residual': value, 'passed': self.flags[name]}
                for name, value in self.residuals.items()]


def _relative(closed, numeric):
    return abs(closed - numeric) / (1.0 + abs(closed))


def run_conjugacy_suite(p, samples=None, seed=None, tolerance=None):
    """Compare closed forms and oracles on random tuples (c, u, d, v, nu)

    Levels are drawn log-uniformly on [0.5, 2]; nu - delta theta on [0.01, 10].

    Raises:
        AssumptionError: outside regimes (i) and (ii), where gamma*psi > 1 fails
            or the preference is unsupported
    """
    if p.regime() not in (Regime.GAMMA_LT1, Regime.BOTH_GT1):
        raise AssumptionError(f'conjugacy requires gamma*psi > 1 in regime (i) or (ii); '
                              f'got {p.regime().value}')
    samples = config.TRANSFORM_SAMPLES if samples is None else int(samples)
    seed = config.MC_SEED if seed is None else seed
    tolerance = config.CONJUGATE_TOL if tolerance is None else tolerance
    rng = np.random.default_rng(seed)

    def levels():
        return np.exp(rng.uniform(np.log(0.5), np.log(2.0), samples))

    c, d, u_abs, v_abs = levels(), levels(), levels(), levels()
    nu = p.delta_theta + np.exp(rng.uniform(np.log(0.01), np.log(10.0), samples))
    sign = p.utility_sign
    residuals = {name: 0.0 for name in ('f', 'F', 'V_T', 'G', 'g')}
    for i in range(samples):
        u, v = sign * u_abs[i], sign * v_abs[i]
        checks = {
            'f': (aggregator_f(p, c[i], u), numeric_f(p, c[i], u)),
            'F': (felicity_F(p, c[i], nu[i]), numeric_F(p, c[i], nu[i])),
            'V_T': (conjugate_V(p, d[i]), numeric_V(p, d[i])),
            'G': (dual_G(p, d[i], nu[i]), numeric_G(p, d[i], nu[i])),
            'g': (dual_g(p, d[i], v), numeric_g(p, d[i], v)),
        }
        for name, (closed, numeric) in checks.items():
            residuals[name] = max(residuals[name], _relative(closed, numeric))
    report = ConjugacyReport(residuals=residuals, samples=samples, tolerance=tolerance,
                             regime=p.regime().value)
    logger.info('Conjugacy suite (%d samples): %s', samples,
                ', '.join(f'{k}={v:.3g}' for k, v in residuals.items()))
    return report
