"""
Value-process solver

The value process Y(t, x) solves the backward equation

    du/dt + 1/2 a^2 u_xx + b u_x + H(u, a u_x) = 0,   u(T, .) = 0

with the Hamiltonian H(y, z) = 1/2 M z^2 + ((1-gamma)/gamma) mu' Sigma^-1 sigma rho z
+ theta (delta^psi / psi) exp(-psi y / theta) + h - delta theta. The linear
diffusion and drift part is stepped implicitly; the generator is evaluated at
the time midpoint and refined by fixed-point iteration within each step.
"""
import logging

import numpy as np
import pandas as pd
from scipy.linalg import solve_banded

import config
from backend.exceptions import AssumptionError, ConvergenceError, ModelError, NumericalError
from backend.market import ModelKind, check_heston, check_kim_omberg, derive_coefficients
from backend.models import BoundReport
from backend.paths import simulate_state
from backend.preferences import Regime
from backend.utils import GridField, mc_stats

logger = logging.getLogger(__name__)


def _expm1_ratio(z):
    """expm1(z) / z with the removable singularity at 0"""
    z = np.asarray(z, dtype=float)
    safe = np.where(z == 0.0, 1.0, z)
    return np.where(z == 0.0, 1.0, np.expm1(safe) / safe)


def spatial_gradient(u, x):
    """Central differences along the last axis, one-sided at both ends"""
    u = np.asarray(u, dtype=float)
    if x.size == 1:
        return np.zeros_like(u)
    grad = np.empty_like(u)
    grad[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (x[2:] - x[:-2])
    grad[..., 0] = (u[..., 1] - u[..., 0]) / (x[1] - x[0])
    grad[..., -1] = (u[..., -1] - u[..., -2]) / (x[-1] - x[-2])
    return grad


def require_duality_regime(p):
    regime = p.regime()
    if regime not in (Regime.GAMMA_LT1, Regime.BOTH_GT1):
        raise AssumptionError(f'value-process solver requires regime (i) or (ii), got {regime.value}')
    return regime


class ExponentialClamp:
    """Truncation of y inside exp(-psi y / theta) at the regime bound

    For theta < 0 values are capped at max(h_max - delta theta, 0) T; for
    0 < theta < 1 they are floored at min(h_min - delta theta, 0) T.
    """

    def __init__(self, p, h_max, h_min, horizon):
        self.theta = p.theta
        if p.theta < 0:
            self.bound = max(h_max - p.delta_theta, 0.0) * horizon
        else:
            self.bound = min(h_min - p.delta_theta, 0.0) * horizon
        self.activations = 0

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.theta < 0:
            hit = y > self.bound
            clipped = np.minimum(y, self.bound)
        else:
            hit = y < self.bound
            clipped = np.maximum(y, self.bound)
        count = int(np.count_nonzero(hit))
        if count:
            self.activations += count
        return clipped

    @property
    def active(self):
        return self.activations > 0


def hamiltonian(p, coeffs, y, z, clamp=None):
    """Primal Hamiltonian H(y, z) on the nodes of a DerivedCoefficients table

    Args:
        p: EZPreference
        coeffs: DerivedCoefficients
        y: value, broadcast against the nodes
        z: loading on W, broadcast against the nodes
        clamp: optional ExponentialClamp applied to y inside the exponential

    Returns:
        numpy array over the nodes
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    y_exp = clamp(y) if clamp is not None else y
    return (0.5 * coeffs.M * z ** 2 + coeffs.z_drift * z
            + p.theta * p.delta ** p.psi / p.psi * np.exp(-p.psi * y_exp / p.theta)
            + coeffs.h - p.delta_theta)


def feedback_hamiltonian(p, coeffs, pi, cbar, y, z, clamp=None):
    """Generator evaluated at a fixed feedback policy instead of the supremum

    Args:
        pi: portfolio weights, shape (m, n)
        cbar: consumption-to-wealth ratio, shape (m,)

    Returns:
        numpy array over the nodes; for gamma > 1 it dominates hamiltonian()
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    y_exp = clamp(y) if clamp is not None else y
    ratio = 1.0 - 1.0 / p.psi
    consumption = -cbar + p.delta * np.exp(-y_exp / p.theta) * cbar ** ratio / ratio
    excess = coeffs.mu + np.einsum('mij,mj->mi', coeffs.sigma, coeffs.rho) * z[..., None]
    risk = (-0.5 * p.gamma * np.einsum('mi,mij,mj->m', pi, coeffs.Sigma, pi)
            + np.einsum('mi,mi->m', pi, excess))
    return ((1.0 - p.gamma) * coeffs.r - p.delta_theta + 0.5 * z ** 2
            + (1.0 - p.gamma) * consumption + (1.0 - p.gamma) * risk)


class ValueSurface:
    """Tabulated value process Y(t, x) with its gradient and loading

    Z(t, x) = Yx(t, x) * a(x) is the loading on the state noise W.
    """

    def __init__(self, t_grid, x_grid, Y, Yx, a_grid, meta=None):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.Yx = np.asarray(Yx, dtype=float)
        self.a_grid = np.asarray(a_grid, dtype=float)
        self.meta = dict(meta or {})
        self.Y_field = GridField(self.t_grid, self.x_grid, self.Y)
        self.Yx_field = GridField(self.t_grid, self.x_grid, self.Yx)

    @property
    def horizon(self):
        return float(self.t_grid[-1])

    @property
    def Z(self):
        return self.Yx * self.a_grid[None, :]

    def value_at(self, t, x):
        return self.Y_field(t, x)

    def gradient_at(self, t, x):
        return self.Yx_field(t, x)

    def y0(self, x0):
        return float(np.atleast_1d(self.value_at(0.0, np.atleast_1d(x0)))[0])

    def upper_bound_excess(self, h_max, delta_theta):
        """max over nodes of Y(t, x) - (h_max - delta theta)(T - t)"""
        remaining = self.horizon - self.t_grid
        bound = (h_max - delta_theta) * remaining[:, None]
        return float(np.max(self.Y - bound))

    def to_frame(self):
        """Long table with columns t, x, Y, Yx in time-major order"""
        nt, nx = self.Y.shape
        return pd.DataFrame({
            't': np.repeat(self.t_grid, nx),
            'x': np.tile(self.x_grid, nt),
            'Y': self.Y.ravel(),
            'Yx': self.Yx.ravel(),
        })


class BackwardPDESolver:
    """Implicit-explicit backward stepper for u_t + L u + generator(t, u, a u_x) = 0

    Args:
        coeffs: DerivedCoefficients on the state grid (supplies a, b)
        horizon: terminal time T
        time_steps: number of backward steps K
        generator: callable(t, y, z) -> array over nodes
        tol: sup-norm fixed-point tolerance
        max_iter: fixed-point iteration cap per step
    """

    def __init__(self, coeffs, horizon, time_steps, generator, tol=None, max_iter=None):
        self.coeffs = coeffs
        self.x = coeffs.x
        self.horizon = float(horizon)
        self.time_steps = int(time_steps)
        self.generator = generator
        self.tol = config.FIXED_POINT_TOL if tol is None else tol
        self.max_iter = config.FIXED_POINT_MAX_ITER if max_iter is None else max_iter
        self.t_grid = np.linspace(0.0, self.horizon, self.time_steps + 1)
        self.dt = self.horizon / self.time_steps if self.time_steps else 0.0
        self._banded = self._implicit_matrix() if self.x.size > 1 else None

    def _operator_bands(self):
        """Tridiagonal bands of 1/2 a^2 d_xx + b d_x with upwind drift"""
        x, a, b = self.x, self.coeffs.a, self.coeffs.b
        m = x.size
        lower, diag, upper = np.zeros(m), np.zeros(m), np.zeros(m)
        hm = x[1:-1] - x[:-2]
        hp = x[2:] - x[1:-1]
        diff_lo = a[1:-1] ** 2 / (hm * (hm + hp))
        diff_up = a[1:-1] ** 2 / (hp * (hm + hp))
        bi = b[1:-1]
        fwd = np.maximum(bi, 0.0) / hp
        bwd = np.minimum(bi, 0.0) / hm
        lower[1:-1] = diff_lo - bwd
        upper[1:-1] = diff_up + fwd
        diag[1:-1] = -diff_lo - diff_up - fwd + bwd

        h0 = x[1] - x[0]
        upper[0] = b[0] / h0
        diag[0] = -b[0] / h0
        h1 = x[-1] - x[-2]
        lower[-1] = -b[-1] / h1
        diag[-1] = b[-1] / h1
        return lower, diag, upper

    def _implicit_matrix(self):
        lower, diag, upper = self._operator_bands()
        ab = np.zeros((3, self.x.size))
        ab[0, 1:] = -self.dt * upper[:-1]
        ab[1, :] = 1.0 - self.dt * diag
        ab[2, :-1] = -self.dt * lower[1:]
        return ab

    def _step(self, n, u_next):
        t_mid = 0.5 * (self.t_grid[n] + self.t_grid[n + 1])
        u = u_next.copy()
        diff = np.inf
        for iteration in range(1, self.max_iter + 1):
            mid = 0.5 * (u_next + u)
            z = self.coeffs.a * spatial_gradient(mid, self.x)
            rhs = u_next + self.dt * self.generator(t_mid, mid, z)
            u_new = rhs if self._banded is None else solve_banded((1, 1), self._banded, rhs)
            if not np.all(np.isfinite(u_new)):
                j = int(np.argmax(~np.isfinite(u_new)))
                raise NumericalError(f'non-finite value at time node {n}, state node {j} (x={self.x[j]:.6g})')
            change = np.abs(u_new - u)
            diff = float(change.max())
            u = u_new
            if diff < self.tol:
                return u, iteration
        j = int(np.argmax(change))
        raise ConvergenceError(f'fixed point did not converge in {self.max_iter} iterations at time node {n} '
                               f'(t={self.t_grid[n]:.6g}), state node {j} (x={self.x[j]:.6g}), '
                               f'last change {diff:.3g}')

    def solve(self, meta=None):
        Y = np.zeros((self.time_steps + 1, self.x.size))
        iterations = []
        for n in range(self.time_steps - 1, -1, -1):
            Y[n], count = self._step(n, Y[n + 1])
            iterations.append(count)
        info = {
            'scheme': 'imex-midpoint',
            'time_steps': self.time_steps,
            'space_nodes': int(self.x.size),
            'dt': self.dt,
            'max_iterations': int(max(iterations)) if iterations else 0,
        }
        info.update(meta or {})
        logger.debug('Backward solve finished: K=%d nodes=%d max fixed-point iterations=%d',
                     self.time_steps, self.x.size, info['max_iterations'])
        return ValueSurface(self.t_grid, self.x, Y, spatial_gradient(Y, self.x), self.coeffs.a, info)


def solve_constant(p, model, horizon, time_steps=None):
    """Closed-form value process for a constant-coefficient market

    With v = exp(psi Y / theta) the backward equation is linear,
    v' = -delta^psi - (psi/theta)(h - delta theta) v, v(T) = 1.
    """
    if not model.is_constant:
        raise ModelError('solve_constant requires a constant-coefficient model')
    require_duality_regime(p)
    K = config.PDE_TIME_STEPS if time_steps is None else int(time_steps)
    coeffs = derive_coefficients(model, p, [model.x0])
    h = float(coeffs.h[0])
    k = p.psi / p.theta * (h - p.delta_theta)
    t_grid = np.linspace(0.0, horizon, K + 1)
    s = horizon - t_grid
    v = np.exp(k * s) + p.delta ** p.psi * s * _expm1_ratio(k * s)
    Y = (p.theta / p.psi * np.log(v))[:, None]
    meta = {'scheme': 'closed-form', 'time_steps': K, 'space_nodes': 1,
            'dt': horizon / K if K else 0.0, 'max_iterations': 0,
            'h_max': h, 'h_min': h, 'clamp_active': False, 'kind': model.kind.value}
    return ValueSurface(t_grid, [model.x0], Y, np.zeros_like(Y), coeffs.a, meta)


def gate_assumptions(p, model, override=False):
    """Run the regime and model checkers; raise AssumptionError unless they pass"""
    require_duality_regime(p)
    if model.kind is ModelKind.HESTON:
        report = check_heston(model.params, p, grid=model.diagnostic_grid())
    elif model.kind is ModelKind.KIM_OMBERG:
        report = check_kim_omberg(model.params, p)
    else:
        return None
    if not (report.applicable and report.accepted):
        reasons = '; '.join(report.reasons) or 'checker rejected the parameters'
        if not override:
            raise AssumptionError(f'{report.name} assumptions fail: {reasons}')
        logger.warning('Assumption gate overridden for %s: %s', report.name, reasons)
    return report


def solve_pde(p, model, horizon, time_steps=None, space_nodes=None, tol=None, max_iter=None,
              override=False):
    """Solve the value-process PDE on the model's diagnostic grid

    Args:
        p: EZPreference in regime (i) or (ii)
        model: MarketModel
        horizon: terminal time T
        time_steps, space_nodes: grid sizes (config defaults)
        tol, max_iter: fixed-point controls
        override: proceed even if the model checker rejects the parameters

    Returns:
        ValueSurface
    """
    gate_assumptions(p, model, override=override)
    K = config.PDE_TIME_STEPS if time_steps is None else int(time_steps)
    grid = model.diagnostic_grid(space_nodes)
    coeffs = derive_coefficients(model, p, grid)
    clamp = ExponentialClamp(p, coeffs.h_max, coeffs.h_min, horizon)

    def generator(t, y, z):
        return hamiltonian(p, coeffs, y, z, clamp)

    solver = BackwardPDESolver(coeffs, horizon, K, generator, tol=tol, max_iter=max_iter)
    surface = solver.solve(meta={'h_max': coeffs.h_max, 'h_min': coeffs.h_min,
                                 'kind': model.kind.value, 'y_clamp': clamp.bound})
    surface.meta['clamp_active'] = clamp.active
    surface.meta['clamp_activations'] = clamp.activations
    if clamp.active:
        logger.warning('Exponential clamp activated %d times (bound %.6g)', clamp.activations, clamp.bound)
    return surface


def verify_y_bounds(vs, model, p, mc_paths, time_steps=None, seed=None, threads=None):
    """Monte Carlo check of the two-sided bounds on Y(0, x0) for gamma, psi > 1

    With X simulated under the changed measure and I = int_0^T h(X) ds, the
    lower bound is

        E[I] - delta theta T + theta delta^psi / psi exp((delta psi - psi h_max / theta) T) T

    i.e. the exponential term frozen at its largest value on [0, T]. A second,
    tighter lower bound integrates that term against Y <= (h_max - delta theta)_+ (T - s):

        E[I] - delta theta T + theta delta^psi / psi (exp(k T) - 1) / k,   k = -psi (h_max - delta theta)_+ / theta

    Two upper bounds are reported: (h_max - delta theta) T over the whole
    surface and -delta theta T + log E[exp I].
    """
    if p.regime() is not Regime.BOTH_GT1:
        report = BoundReport(y0=vs.y0(model.x0), n_paths=0)
        report.flags = {'bounds_applicable': False}
        return report

    T = vs.horizon
    K = config.MC_STEPS if time_steps is None else int(time_steps)
    seed = config.MC_SEED if seed is None else seed
    y0 = vs.y0(model.x0)
    h_max = float(vs.meta.get('h_max', np.nan))

    bundle = simulate_state(model, mc_paths, K, seed, T, threads=threads, measure='adjusted', p=p)
    h_paths = np.empty_like(bundle.X)
    for i in range(bundle.X.shape[1]):
        h_paths[:, i] = derive_coefficients(model, p, model.regularize(bundle.X[:, i])).h
    dt = bundle.dt
    integral = dt * (0.5 * h_paths[:, 0] + h_paths[:, 1:-1].sum(axis=1) + 0.5 * h_paths[:, -1])
    if not np.isfinite(h_max):
        h_max = float(np.max(h_paths))

    scale = p.theta * p.delta ** p.psi / p.psi
    base = float(integral.mean()) - p.delta_theta * T
    lower = base + scale * np.exp((p.delta * p.psi - p.psi * h_max / p.theta) * T) * T
    k = -p.psi * max(h_max - p.delta_theta, 0.0) / p.theta
    lower_integrated = base + scale * T * float(_expm1_ratio(k * T))
    lower_se = mc_stats.standard_error(integral)

    growth = np.exp(integral - integral.max())
    mean_growth = float(growth.mean())
    upper_logexp = float(np.log(mean_growth) + integral.max()) - p.delta_theta * T
    upper_logexp_se = mc_stats.standard_error(growth) / mean_growth
    upper_hmax = (h_max - p.delta_theta) * T
    mc_stats.warn_if_high_std_error(lower, lower_se, 'Y lower bound')

    band = config.SIGMA_BAND
    report = BoundReport(y0=y0, lower=float(lower), lower_se=lower_se, lower_integrated=lower_integrated,
                         upper_hmax=upper_hmax, upper_logexp=upper_logexp,
                         upper_logexp_se=upper_logexp_se, h_max=h_max, n_paths=int(mc_paths),
                         truncation_fraction=bundle.truncation_fraction)
    report.flags = {
        'lower_bound': bool(y0 >= lower - band * lower_se - config.BOUND_TOL),
        'lower_bound_integrated': bool(y0 >= lower_integrated - band * lower_se - config.BOUND_TOL),
        'upper_bound_hmax': bool(vs.upper_bound_excess(h_max, p.delta_theta) <= config.BOUND_TOL),
        'upper_bound_logexp': bool(y0 <= upper_logexp + band * upper_logexp_se + config.BOUND_TOL),
    }
    logger.info('Y bounds: lower=%.8g (integrated %.8g, se %.2g) y0=%.8g upper=%.8g',
                lower, lower_integrated, lower_se, y0, upper_hmax)
    return report
