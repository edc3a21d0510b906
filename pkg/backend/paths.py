"""
Path simulation for the state, wealth, deflator and discount processes

Every path draws its normals from its own counter-based stream
Philox(key=seed, counter=(0, 0, 0, path_index)), so a path is identical
whatever the number of worker threads.
"""
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

import config
from backend.exceptions import NumericalError
from backend.market import ModelKind, complete_correlation_stack, derive_coefficients
from backend.models import BaseModel

logger = logging.getLogger(__name__)


def path_generator(seed, path_index):
    """Random generator for one path"""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(path_index)]))


def _draw_chunk(seed, indices, n_steps, width):
    block = np.empty((len(indices), n_steps, width))
    for k, i in enumerate(indices):
        block[k] = path_generator(seed, i).standard_normal((n_steps, width))
    return block


def draw_normals(seed, n_paths, n_steps, width, threads=None):
    """Standard normals of shape (n_paths, n_steps, width), one stream per path"""
    threads = config.THREADS if threads is None else max(1, int(threads))
    chunks = [c for c in np.array_split(np.arange(n_paths), threads) if c.size]
    if threads == 1 or len(chunks) == 1:
        return _draw_chunk(seed, np.arange(n_paths), n_steps, width)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        blocks = list(pool.map(lambda idx: _draw_chunk(seed, idx, n_steps, width), chunks))
    return np.concatenate(blocks, axis=0)


class PathBundle:
    """Simulated state paths and their driving Brownian increments

    X has shape (N, K+1); dW has shape (N, K); dWperp has shape (N, K, n).
    """

    def __init__(self, t_grid, X, dW, dWperp, seed, measure='physical', truncation_fraction=0.0):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.X = X
        self.dW = dW
        self.dWperp = dWperp
        self.seed = int(seed)
        self.measure = measure
        self.truncation_fraction = float(truncation_fraction)

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def n_steps(self):
        return self.X.shape[1] - 1

    @property
    def dt(self):
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def horizon(self):
        return float(self.t_grid[-1])

    @property
    def seed_scheme(self):
        return {'generator': 'Philox', 'key': self.seed, 'counter': '(0, 0, 0, path_index)'}

    def correlated_increments(self, step, rho, rho_perp):
        """Increments of W^rho = rho dW + rho_perp dW_perp at one step, shape (N, n)"""
        return (rho * self.dW[:, step, None]
                + np.einsum('pij,pj->pi', rho_perp, self.dWperp[:, step, :]))

    def export_frame(self, limit=None):
        """Long table path_id, t, X, dW, dWperp_k for the first paths"""
        limit = config.PATH_EXPORT_LIMIT if limit is None else int(limit)
        count = min(limit, self.n_paths)
        K1 = self.n_steps + 1
        pad = np.full((count, 1), np.nan)
        frame = {
            'path_id': np.repeat(np.arange(count), K1),
            't': np.tile(self.t_grid, count),
            'X': self.X[:count].ravel(),
            'dW': np.hstack([self.dW[:count], pad]).ravel(),
        }
        for k in range(self.dWperp.shape[2]):
            frame[f'dWperp_{k + 1}'] = np.hstack([self.dWperp[:count, :, k], pad]).ravel()
        return pd.DataFrame(frame)


class WealthPath:
    """Wealth, consumption and the policy along each path

    wealth and consumption have shape (N, K+1); the last consumption column
    is the terminal wealth consumed at T. pi has shape (N, K, n).
    """

    def __init__(self, wealth, consumption, cbar, pi, w0):
        self.wealth = wealth
        self.consumption = consumption
        self.cbar = cbar
        self.pi = pi
        self.w0 = float(w0)
        self.log_domain = True


class DeflatorPath:
    """State price density D along each path with its loadings"""

    def __init__(self, deflator, xi, eta, constraint_residual):
        self.deflator = deflator
        self.xi = xi
        self.eta = eta
        self.constraint_residual = float(constraint_residual)
        self.log_domain = True


class DiscountPath:
    """Discount factors kappa_{0,t} = exp(-int_0^t nu) on the time grid"""

    def __init__(self, kappa, step_factors):
        self.kappa = kappa
        self.step_factors = step_factors

    def between(self, s, t):
        """kappa_{s,t} for grid indices s <= t"""
        return np.prod(self.step_factors[..., s:t], axis=-1)


class FeedbackPolicy:
    """Feedback rule: portfolio pi(t, x) in R^n and consumption ratio cbar(t, x)"""

    def __init__(self, pi_fn, cbar_fn, n, label='feedback'):
        self._pi_fn = pi_fn
        self._cbar_fn = cbar_fn
        self.n = int(n)
        self.label = label

    @classmethod
    def constant(cls, pi, cbar, label='constant'):
        pi = np.atleast_1d(np.asarray(pi, dtype=float))
        cbar = float(cbar)
        return cls(lambda t, x: np.broadcast_to(pi, (np.size(x), pi.size)).copy(),
                   lambda t, x: np.full(np.size(x), cbar), pi.size, label)

    def pi(self, t, x):
        return np.asarray(self._pi_fn(t, np.atleast_1d(x)), dtype=float).reshape(np.size(x), self.n)

    def cbar(self, t, x):
        return np.asarray(self._cbar_fn(t, np.atleast_1d(x)), dtype=float).reshape(np.size(x))

    def scaled(self, factor, label=None):
        """Same consumption rule with the portfolio multiplied by factor"""
        return FeedbackPolicy(lambda t, x: factor * self.pi(t, x), self.cbar, self.n,
                              label or f'{factor:g}*{self.label}')


class Loadings:
    """Deflator loadings xi(t, x) on W and eta(t, x) on W_perp"""

    def __init__(self, xi_fn, eta_fn, n):
        self._xi_fn = xi_fn
        self._eta_fn = eta_fn
        self.n = int(n)

    @classmethod
    def constant(cls, xi, eta):
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        xi = float(xi)
        return cls(lambda t, x: np.full(np.size(x), xi),
                   lambda t, x: np.broadcast_to(eta, (np.size(x), eta.size)).copy(), eta.size)

    def xi(self, t, x):
        return np.asarray(self._xi_fn(t, np.atleast_1d(x)), dtype=float).reshape(np.size(x))

    def eta(self, t, x):
        return np.asarray(self._eta_fn(t, np.atleast_1d(x)), dtype=float).reshape(np.size(x), self.n)


def _require_finite(name, values, step):
    bad = ~np.isfinite(values)
    if np.any(bad):
        path = int(np.argwhere(bad)[0][0])
        raise NumericalError(f'{name} is not finite at time node {step}, path {path}')


def simulate_state(model, n_paths, n_steps, seed, horizon, threads=None, measure='physical', p=None):
    """Euler simulation of the state with per-path random streams

    Heston paths use full truncation: drift and diffusion see max(X, 0).
    With measure='adjusted' the drift gains ((1-gamma)/gamma) a rho' sigma' Sigma^-1 mu,
    which needs the preference p.

    Returns:
        PathBundle
    """
    if measure not in ('physical', 'adjusted'):
        raise ValueError(f'unknown measure {measure!r}')
    if measure == 'adjusted' and p is None:
        raise ValueError('the adjusted measure needs a preference')
    N, K = int(n_paths), int(n_steps)
    t_grid = np.linspace(0.0, horizon, K + 1)
    dt = horizon / K
    normals = draw_normals(seed, N, K, 1 + model.n, threads=threads)
    dW = np.sqrt(dt) * normals[:, :, 0]
    dWperp = np.sqrt(dt) * normals[:, :, 1:]

    X = np.empty((N, K + 1))
    X[:, 0] = model.x0
    truncated = 0
    if model.is_constant:
        X[:] = model.x0
    else:
        for i in range(K):
            x = X[:, i]
            if model.kind is ModelKind.HESTON:
                below = x < 0
                truncated += int(np.count_nonzero(below))
                x_eval = np.maximum(x, 0.0)
                hp = model.params
                drift = hp.b * (hp.ell - x_eval)
                vol = hp.a * np.sqrt(x_eval)
            else:
                _, _, _, _, drift, vol = model.coefficients(x)
            if measure == 'adjusted':
                coeffs = derive_coefficients(model, p, model.regularize(x))
                drift = drift + vol * coeffs.z_drift
            X[:, i + 1] = x + drift * dt + vol * dW[:, i]

    fraction = truncated / float(N * K)
    if model.kind is ModelKind.HESTON:
        logger.debug('Heston full truncation active on %.3g%% of steps', 100.0 * fraction)
        if fraction > config.MAX_TRUNCATION_FRACTION:
            logger.warning('Heston truncation fraction %.3g exceeds %.3g', fraction, config.MAX_TRUNCATION_FRACTION)
    return PathBundle(t_grid, X, dW, dWperp, seed, measure=measure, truncation_fraction=fraction)


def simulate_wealth(bundle, model, policy, w0):
    """Log-Euler wealth under a feedback policy

    d log W = (r + pi' mu - cbar - 1/2 pi' Sigma pi) dt + pi' sigma dW^rho

    Returns:
        WealthPath
    """
    if not w0 > 0:
        raise ValueError('initial wealth must be positive')
    N, K, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    log_w = np.empty((N, K + 1))
    log_w[:, 0] = np.log(w0)
    cbar = np.empty((N, K))
    pis = np.empty((N, K, model.n))
    for i in range(K):
        t = bundle.t_grid[i]
        x = model.regularize(bundle.X[:, i])
        r, mu, sigma, rho, _, _ = model.coefficients(x)
        pi = policy.pi(t, x)
        c = policy.cbar(t, x)
        _require_finite('portfolio', pi, i)
        _require_finite('consumption ratio', c, i)
        dw_rho = bundle.correlated_increments(i, rho, complete_correlation_stack(rho))
        Sigma = np.einsum('pik,pjk->pij', sigma, sigma)
        drift = r + np.einsum('pi,pi->p', pi, mu) - c - 0.5 * np.einsum('pi,pij,pj->p', pi, Sigma, pi)
        shock = np.einsum('pi,pij,pj->p', pi, sigma, dw_rho)
        log_w[:, i + 1] = log_w[:, i] + drift * dt + shock
        cbar[:, i] = c
        pis[:, i] = pi
    wealth = np.exp(log_w)
    consumption = np.empty_like(wealth)
    consumption[:, :-1] = cbar * wealth[:, :-1]
    consumption[:, -1] = wealth[:, -1]
    return WealthPath(wealth, consumption, cbar, pis, w0)


def simulate_deflator(bundle, model, loadings):
    """Log-Euler state price density with D_0 = 1

    d log D = (-r - 1/2 xi^2 - 1/2 |eta|^2) dt + xi dW + eta dW_perp. The
    pathwise residual of mu + sigma rho xi + sigma rho_perp eta is recorded.

    Returns:
        DeflatorPath
    """
    N, K, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    log_d = np.zeros((N, K + 1))
    xis = np.empty((N, K))
    etas = np.empty((N, K, model.n))
    residual = 0.0
    for i in range(K):
        t = bundle.t_grid[i]
        x = model.regularize(bundle.X[:, i])
        r, mu, sigma, rho, _, _ = model.coefficients(x)
        xi = loadings.xi(t, x)
        eta = loadings.eta(t, x)
        _require_finite('loading xi', xi, i)
        _require_finite('loading eta', eta, i)
        rho_perp = complete_correlation_stack(rho)
        spanned = rho * xi[:, None] + np.einsum('pij,pj->pi', rho_perp, eta)
        gap = mu + np.einsum('pij,pj->pi', sigma, spanned)
        residual = max(residual, float(np.max(np.abs(gap))))
        drift = -r - 0.5 * xi ** 2 - 0.5 * np.einsum('pi,pi->p', eta, eta)
        log_d[:, i + 1] = (log_d[:, i] + drift * dt + xi * bundle.dW[:, i]
                           + np.einsum('pi,pi->p', eta, bundle.dWperp[:, i, :]))
        xis[:, i] = xi
        etas[:, i] = eta
    return DeflatorPath(np.exp(log_d), xis, etas, residual)


def discount_kappa(nu_path, t_grid):
    """Trapezoidal discount factors for a rate process on the time grid

    Args:
        nu_path: rates at the grid nodes, shape (..., K+1)
        t_grid: time nodes

    Returns:
        DiscountPath with kappa of the same shape as nu_path
    """
    nu = np.asarray(nu_path, dtype=float)
    _require_finite('discount rate', np.atleast_2d(nu), 0)
    dt = np.diff(np.asarray(t_grid, dtype=float))
    factors = np.exp(-0.5 * (nu[..., :-1] + nu[..., 1:]) * dt)
    kappa = np.concatenate([np.ones(nu.shape[:-1] + (1,)), np.cumprod(factors, axis=-1)], axis=-1)
    return DiscountPath(kappa, factors)


class IncrementReport(BaseModel):
    """Sanity gates on the simulated Brownian increments"""

    def __init__(self, mean_scaled=None, mean_bound=None, variance_error=None, variance_tol=None,
                 correlation=None, correlation_target=None, correlation_se=None, **kwargs):
        super().__init__(**kwargs)
        self.mean_scaled = mean_scaled
        self.mean_bound = mean_bound
        self.variance_error = variance_error
        self.variance_tol = variance_tol
        self.correlation = correlation
        self.correlation_target = correlation_target
        self.correlation_se = correlation_se
        self.flags = {}


def increment_diagnostics(bundle, model):
    """Check increment mean, per-step variance and corr(dW^rho, dW)"""
    N, K, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    scaled = np.concatenate([bundle.dW[:, :, None], bundle.dWperp], axis=2) / np.sqrt(dt)
    mean_scaled = float(np.max(np.abs(scaled.mean(axis=(0, 1)))))
    mean_bound = 4.0 / np.sqrt(N * K)
    step_var = scaled.var(axis=0, ddof=1)
    variance_error = float(np.max(np.abs(step_var - 1.0)))
    variance_tol = max(0.05, 4.0 * np.sqrt(2.0 / max(N - 1, 1)))

    _, _, _, rho, _, _ = model.coefficients(np.array([model.x0]))
    rho = rho[0]
    rho_perp = complete_correlation_stack(rho[None, :])[0]
    dw_rho = rho[None, None, :] * bundle.dW[:, :, None] + np.einsum('ij,pkj->pki', rho_perp, bundle.dWperp)
    base = bundle.dW.ravel()
    correlation = np.array([np.corrcoef(base, dw_rho[:, :, k].ravel())[0, 1] for k in range(model.n)])
    correlation_se = (1.0 - rho ** 2) / np.sqrt(N * K)
    band = config.SIGMA_BAND * correlation_se + 1e-12

    report = IncrementReport(mean_scaled=mean_scaled, mean_bound=mean_bound, variance_error=variance_error,
                             variance_tol=variance_tol, correlation=correlation, correlation_target=rho,
                             correlation_se=correlation_se)
    report.flags = {
        'increment_mean': bool(mean_scaled <= mean_bound),
        'increment_variance': bool(variance_error <= variance_tol),
        'increment_correlation': bool(np.all(np.abs(correlation - rho) <= band)),
    }
    return report
