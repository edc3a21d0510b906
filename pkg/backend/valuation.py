"""
Backward Monte Carlo valuation of recursive utilities and duals

Both recursions are stepped on the path grid with conditional expectations
estimated by cross-sectional least squares (LSMC). The generator is treated
implicitly; after scaling by W^(1-gamma) (primal) or (yD)^((gamma-1)/gamma)
(dual) each node reduces to a scalar equation A q - e - k q^p = 0 in the
positive unknown q = (1-gamma) U, respectively (1-gamma) V / gamma.
"""
import logging

import numpy as np
import pandas as pd

import config
from backend.exceptions import ValuationError
from backend.models import BaseModel
from backend.paths import discount_kappa
from backend.preferences import aggregator_f, bequest_U, conjugate_V, dual_G, dual_g, felicity_F
from backend.utils import mc_stats

logger = logging.getLogger(__name__)


class LSMCRegressor:
    """Least squares on bivariate monomials of total degree <= degree

    Both coordinates are standardised cross-sectionally; a coordinate with no
    cross-sectional spread is dropped together with every monomial using it.
    The degree is lowered until there are at least five paths per column.
    """

    def __init__(self, degree=None):
        self.degree = config.LSMC_DEGREE if degree is None else int(degree)

    @staticmethod
    def _standardise(values):
        values = np.asarray(values, dtype=float)
        mean = float(values.mean())
        spread = float(values.std())
        if spread <= 1e-12 * (1.0 + abs(mean)):
            return None
        return (values - mean) / spread

    def design(self, state, log_scale):
        s = self._standardise(state)
        w = self._standardise(log_scale)
        n = np.size(state)
        degree = self.degree
        while degree > 0 and (degree + 1) * (degree + 2) // 2 > max(1, n // 5):
            degree -= 1
        columns, labels = [np.ones(n)], ['1']
        for total in range(1, degree + 1):
            for i in range(total, -1, -1):
                j = total - i
                if (i and s is None) or (j and w is None):
                    continue
                col = np.ones(n)
                if i:
                    col = col * s ** i
                if j:
                    col = col * w ** j
                columns.append(col)
                labels.append(f'x^{i} w^{j}')
        return np.column_stack(columns), labels

    def fit_predict(self, state, log_scale, target, node):
        """Fitted conditional expectation of target at every path

        Returns:
            (fitted values, diagnostics dict)
        """
        basis, labels = self.design(state, log_scale)
        coef, _, rank, _ = np.linalg.lstsq(basis, target, rcond=None)
        if rank < basis.shape[1]:
            raise ValuationError(f'regression rank {rank} < {basis.shape[1]} basis functions at time node {node}')
        fitted = basis @ coef
        total = float(np.sum((target - target.mean()) ** 2))
        r2 = 1.0 - float(np.sum((target - fitted) ** 2)) / total if total > 0 else 1.0
        diagnostics = {'node': int(node), 'rank': int(rank), 'columns': len(labels), 'r2': r2}
        logger.debug('LSMC node %d: rank=%d r2=%.6f', node, rank, r2)
        return fitted, diagnostics


def solve_implicit(A, e, k, power, node, tol=None, max_iter=None):
    """Positive root of A q - e - k q^power = 0, vectorised over paths

    The left side is increasing in q in both supported regimes. Newton steps
    are accepted inside the current bracket, bisection otherwise.
    """
    tol = config.IMPLICIT_SOLVE_TOL if tol is None else tol
    max_iter = config.IMPLICIT_SOLVE_MAX_ITER if max_iter is None else max_iter
    e = np.asarray(e, dtype=float)
    k = np.broadcast_to(np.asarray(k, dtype=float), e.shape)
    if power == 0.0:
        q = (e + k) / A
        if np.any(q <= 0):
            raise ValuationError(f'sign constraint violated at time node {node}')
        return q

    def phi(q):
        return A * q - e - k * q ** power

    if power > 0:
        if np.any(e <= 0):
            raise ValuationError(f'non-positive continuation value at time node {node}')
        lo = np.zeros_like(e)
        hi = e / A
        for _ in range(200):
            short = phi(hi) < 0
            if not np.any(short):
                break
            hi = np.where(short, 2.0 * hi, hi)
    else:
        start = np.where(e > 0, e / A, 1.0)
        lo, hi = start.copy(), start.copy()
        for _ in range(2000):
            high = phi(lo) > 0
            if not np.any(high):
                break
            lo = np.where(high, 0.5 * lo, lo)
        for _ in range(2000):
            short = phi(hi) < 0
            if not np.any(short):
                break
            hi = np.where(short, 2.0 * hi, hi)

    q = 0.5 * (lo + hi)
    for _ in range(max_iter):
        value = phi(q)
        lo = np.where(value < 0, q, lo)
        hi = np.where(value > 0, q, hi)
        slope = A - k * power * q ** (power - 1.0)
        step = q - value / slope
        inside = np.isfinite(step) & (step > lo) & (step < hi)
        q_new = np.where(inside, step, 0.5 * (lo + hi))
        done = np.abs(q_new - q) <= tol * np.maximum(1.0, np.abs(q))
        q = q_new
        if np.all(done):
            break
    else:
        raise ValuationError(f'implicit solve did not converge at time node {node}')
    if np.any(~(q > 0)):
        raise ValuationError(f'sign constraint violated at time node {node}')
    return q


class RecursiveValue:
    """Backward LSMC estimate of a recursive utility or dual along paths"""

    def __init__(self, values, t_grid, estimate, standard_error, diagnostics, kind):
        self.values = values
        self.t_grid = t_grid
        self.estimate = float(estimate)
        self.standard_error = float(standard_error)
        self.diagnostics = diagnostics
        self.kind = kind
        self.estimator = {'method': 'lsmc', 'basis': 'bivariate monomials',
                          'degree': config.LSMC_DEGREE, 'batches': config.MC_BATCHES}

    @property
    def time_means(self):
        return self.values.mean(axis=0)

    @property
    def time_standard_errors(self):
        return np.array([mc_stats.standard_error(col) for col in self.values.T])

    @property
    def max_residual(self):
        return max((d.get('residual', 0.0) for d in self.diagnostics), default=0.0)

    def to_frame(self):
        return pd.DataFrame({'t': self.t_grid, 'mean': self.time_means, 'se': self.time_standard_errors})


class VariationalValue(BaseModel):
    """Estimate of a variational (fixed discount rate) value"""

    def __init__(self, nu_path=None, estimate=None, standard_error=None, samples=None, **kwargs):
        super().__init__(**kwargs)
        self.nu_path = nu_path
        self.estimate = estimate
        self.standard_error = standard_error
        self.samples = samples


def _nu_grid(nu_path, shape):
    nu = np.asarray(nu_path, dtype=float)
    return np.broadcast_to(nu, shape).copy()


def _backward(X, scale, terminal_q, A, k_scaled, power, generator=True, regressor=None, residual_fn=None):
    """Backward induction on scaled values for one set of paths

    X and scale have shape (N, K+1); k_scaled has shape (N, K).

    Returns:
        (q of shape (N, K+1), per-node diagnostics)
    """
    regressor = regressor or LSMCRegressor()
    N, K = X.shape[0], X.shape[1] - 1
    log_scale = np.log(scale)
    q = np.empty((N, K + 1))
    q[:, -1] = terminal_q
    diagnostics = []
    for i in range(K - 1, -1, -1):
        target = q[:, i + 1] / scale[:, i]
        fitted, info = regressor.fit_predict(X[:, i], log_scale[:, i], target, i)
        if generator:
            q_scaled = solve_implicit(A, fitted, k_scaled[:, i], power, i)
            if residual_fn is not None:
                info['residual'] = float(np.max(np.abs(
                    residual_fn(i, q_scaled * scale[:, i], fitted * scale[:, i]))))
        else:
            q_scaled = fitted
        q[:, i] = q_scaled * scale[:, i]
        diagnostics.append(info)
    diagnostics.reverse()
    return q, diagnostics


def _batch_estimates(X, scale, terminal_q, A, k_scaled, power, generator, regressor, batches):
    """Time-zero estimates of q from independent backward runs on path batches"""
    labels = mc_stats.batch_labels(X.shape[0], batches)
    estimates = []
    for b in range(labels.max() + 1):
        idx = labels == b
        q, _ = _backward(X[idx], scale[idx], terminal_q[idx], A, k_scaled[idx], power,
                         generator=generator, regressor=regressor)
        estimates.append(q[:, 0].mean())
    return np.array(estimates)


def _recursive_value(bundle, scale, terminal_q, A, k_scaled, power, to_value, residual_fn, kind,
                     generator, regressor, batches):
    batches = config.MC_BATCHES if batches is None else batches
    q, diagnostics = _backward(bundle.X, scale, terminal_q, A, k_scaled, power,
                               generator=generator, regressor=regressor, residual_fn=residual_fn)
    batch_q = _batch_estimates(bundle.X, scale, terminal_q, A, k_scaled, power, generator, regressor, batches)
    values = to_value(q)
    estimate = float(values[:, 0].mean())
    se = mc_stats.batch_standard_error(to_value(batch_q))
    mc_stats.warn_if_high_std_error(estimate, se, f'{kind} value')
    return RecursiveValue(values, bundle.t_grid, estimate, se, diagnostics, kind)


def evaluate_sdu(bundle, wealth, p, generator=True, regressor=None, batches=None):
    """Recursive utility U^c along the wealth paths

    The point estimate regresses on all paths; the standard error comes from
    independent backward runs on path batches.

    Args:
        bundle: PathBundle
        wealth: WealthPath
        p: EZPreference
        generator: False drops the aggregator (pure conditional expectation)

    Returns:
        RecursiveValue with values U of shape (N, K+1)
    """
    dt = bundle.dt
    scale = wealth.wealth ** (1.0 - p.gamma)
    terminal_q = (1.0 - p.gamma) * bequest_U(p, wealth.consumption[:, -1])
    A = 1.0 + dt * p.delta_theta
    power = 1.0 - 1.0 / p.theta
    k_scaled = dt * p.theta * p.delta * wealth.cbar ** (1.0 - 1.0 / p.psi)

    def residual(i, q_i, e_i):
        u = q_i / (1.0 - p.gamma)
        cond = e_i / (1.0 - p.gamma)
        return (u - cond - dt * aggregator_f(p, wealth.consumption[:, i], u)) / np.maximum(1.0, np.abs(u))

    return _recursive_value(bundle, scale, terminal_q, A, k_scaled, power,
                            lambda q: q / (1.0 - p.gamma), residual, 'primal',
                            generator, regressor, batches)


def evaluate_sdd(bundle, deflator, y, p, generator=True, regressor=None, batches=None):
    """Stochastic differential dual V^{yD} along the deflator paths

    The recursion is V_t = E_t[V_{t+dt}] + g(yD_t, V_t / gamma) dt with V_T(yD_T)
    at the terminal node.

    Returns:
        RecursiveValue with values V of shape (N, K+1)
    """
    if not y > 0:
        raise ValueError('the multiplier y must be positive')
    dt = bundle.dt
    yD = y * deflator.deflator
    scale = yD ** ((p.gamma - 1.0) / p.gamma)
    terminal_q = (1.0 - p.gamma) / p.gamma * conjugate_V(p, yD[:, -1])
    A = 1.0 + dt * p.delta_theta / p.gamma
    power = 1.0 - p.gamma * p.psi / p.theta
    k_scaled = np.full((bundle.n_paths, bundle.n_steps), dt * p.theta * p.delta ** p.psi / (p.gamma * p.psi))

    def residual(i, q_i, e_i):
        v = p.gamma * q_i / (1.0 - p.gamma)
        cond = p.gamma * e_i / (1.0 - p.gamma)
        return (v - cond - dt * dual_g(p, yD[:, i], v / p.gamma)) / np.maximum(1.0, np.abs(v))

    return _recursive_value(bundle, scale, terminal_q, A, k_scaled, power,
                            lambda q: p.gamma * q / (1.0 - p.gamma), residual, 'dual',
                            generator, regressor, batches)


def evaluate_variational(bundle, wealth, nu_path, p):
    """U_0^{c,nu} = E[kappa_T U_T(c_T) + sum kappa_s F(c_s, nu_s) dt]

    Args:
        nu_path: scalar or array broadcastable to (N, K+1) with nu > delta theta

    Returns:
        VariationalValue
    """
    N, K, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    nu = _nu_grid(nu_path, (N, K + 1))
    kappa = discount_kappa(nu, bundle.t_grid).kappa
    running = kappa[:, :-1] * felicity_F(p, wealth.consumption[:, :-1], nu[:, :-1])
    samples = kappa[:, -1] * bequest_U(p, wealth.consumption[:, -1]) + dt * running.sum(axis=1)
    estimate = float(samples.mean())
    se = mc_stats.standard_error(samples)
    return VariationalValue(nu_path=nu_path, estimate=estimate, standard_error=se, samples=samples)


def evaluate_dual_variational(bundle, deflator, y, nu_path, p):
    """V_0^{yD,nu} = E[kappa^{nu/gamma}_T V_T(yD_T) + sum kappa^{nu/gamma}_s G(yD_s, nu_s) dt]"""
    N, K, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    nu = _nu_grid(nu_path, (N, K + 1))
    yD = y * deflator.deflator
    kappa = discount_kappa(nu / p.gamma, bundle.t_grid).kappa
    running = kappa[:, :-1] * dual_G(p, yD[:, :-1], nu[:, :-1])
    samples = kappa[:, -1] * conjugate_V(p, yD[:, -1]) + dt * running.sum(axis=1)
    estimate = float(samples.mean())
    se = mc_stats.standard_error(samples)
    return VariationalValue(nu_path=nu_path, estimate=estimate, standard_error=se, samples=samples)
