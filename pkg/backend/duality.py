"""
Optimal strategies from the value surface and duality verification

From a solved surface (Y, Z) the candidate optimizers are

    pi*   = (1/gamma) Sigma^-1 (mu + sigma rho Z)
    cbar* = delta^psi exp(-psi Y / theta)
    xi*   = -(mu + sigma rho Z)' Sigma^-1 sigma rho + Z
    eta*  = -(mu + sigma rho Z)' Sigma^-1 sigma rho_perp
    y*    = w^-gamma exp(Y(0, x0))

and verify_duality checks that primal and dual values coincide along
simulated paths with common random numbers.
"""
import logging

import numpy as np
import pandas as pd

import config
from backend.bsde import (BackwardPDESolver, ExponentialClamp, feedback_hamiltonian, require_duality_regime,
                          solve_constant, solve_pde, verify_y_bounds)
from backend.exceptions import EZDualityError, ModelError, NumericalError
from backend.market import complete_correlation_stack, derive_coefficients
from backend.models import DualityReport, IdentityReport
from backend.paths import (FeedbackPolicy, increment_diagnostics, simulate_deflator, simulate_state,
                           simulate_wealth)
from backend.preferences import Regime
from backend.utils import mc_stats
from backend.valuation import evaluate_sdd, evaluate_sdu

logger = logging.getLogger(__name__)


class OptimalPolicy(FeedbackPolicy):
    """Candidate optimizers read off a ValueSurface at arbitrary (t, x)

    All quantities are computed pointwise from the interpolated Y and Yx and
    the market coefficients at x, so the deflator constraint holds exactly
    wherever the policy is evaluated.
    """

    def __init__(self, vs, model, p, w0):
        super().__init__(self._pi_at, self._cbar_at, model.n, label='optimal')
        self.vs = vs
        self.model = model
        self.p = p
        self.w0 = float(w0)
        self.y0 = vs.y0(model.x0)
        self.y_star = self.w0 ** (-p.gamma) * np.exp(self.y0)

    def components(self, t, x):
        """Return (pi, cbar, xi, eta, residual) at time t for the states x"""
        p = self.p
        x = self.model.regularize(np.atleast_1d(x))
        Y = self.vs.value_at(t, x)
        Yx = self.vs.gradient_at(t, x)
        r, mu, sigma, rho, _, a = self.model.coefficients(x)
        Z = Yx * a
        Sigma = np.einsum('mik,mjk->mij', sigma, sigma)
        try:
            excess = mu + np.einsum('mij,mj->mi', sigma, rho) * Z[:, None]
            weights = np.linalg.solve(Sigma, excess[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise ModelError(f'Sigma is singular at t={t:.6g}') from exc
        rho_perp = complete_correlation_stack(rho)
        exposure = np.einsum('mi,mij->mj', weights, sigma)
        pi = weights / p.gamma
        cbar = p.delta ** p.psi * np.exp(-p.psi * Y / p.theta)
        xi = -np.einsum('mj,mj->m', exposure, rho) + Z
        eta = -np.einsum('mk,mkj->mj', exposure, rho_perp)
        spanned = rho * xi[:, None] + np.einsum('mij,mj->mi', rho_perp, eta)
        residual = mu + np.einsum('mij,mj->mi', sigma, spanned)
        for name, values in (('pi', pi), ('cbar', cbar), ('xi', xi), ('eta', eta)):
            bad = ~np.isfinite(values)
            if np.any(bad):
                j = int(np.argwhere(bad)[0][0])
                raise NumericalError(f'{name} is not finite at t={t:.6g}, x={x[j]:.6g}')
        return pi, cbar, xi, eta, residual

    def _pi_at(self, t, x):
        return self.components(t, x)[0]

    def _cbar_at(self, t, x):
        return self.components(t, x)[1]

    def xi(self, t, x):
        return self.components(t, x)[2]

    def eta(self, t, x):
        return self.components(t, x)[3]

    def constraint_residual(self):
        """Sup-norm of mu + sigma rho xi + sigma rho_perp eta over the surface nodes"""
        worst = 0.0
        for t in self.vs.t_grid:
            worst = max(worst, float(np.max(np.abs(self.components(t, self.vs.x_grid)[4]))))
        return worst

    def table(self):
        """Policy on the surface nodes as a long table"""
        rows = []
        for t in self.vs.t_grid:
            pi, cbar, xi, eta, _ = self.components(t, self.vs.x_grid)
            frame = {'t': np.full(self.vs.x_grid.size, t), 'x': self.vs.x_grid, 'cbar': cbar, 'xi': xi}
            for k in range(self.n):
                frame[f'pi_{k + 1}'] = pi[:, k]
                frame[f'eta_{k + 1}'] = eta[:, k]
            rows.append(pd.DataFrame(frame))
        return pd.concat(rows, ignore_index=True)


class PerturbedLoadings:
    """Loadings xi* + epsilon with eta re-solved so the deflator constraint holds"""

    def __init__(self, policy, model, epsilon):
        self.policy = policy
        self.model = model
        self.epsilon = float(epsilon)
        self.n = model.n

    def xi(self, t, x):
        return self.policy.xi(t, x) + self.epsilon

    def eta(self, t, x):
        x = self.model.regularize(np.atleast_1d(x))
        _, mu, sigma, rho, _, _ = self.model.coefficients(x)
        xi = self.xi(t, x)
        rhs = -(mu + np.einsum('mij,mj->mi', sigma, rho) * xi[:, None])
        lhs = np.einsum('mik,mkj->mij', sigma, complete_correlation_stack(rho))
        return np.einsum('mij,mj->mi', np.linalg.pinv(lhs), rhs)


def extract_policy(vs, model, p, w0):
    """Candidate optimal policy, loadings and multiplier from a solved surface

    Raises:
        NumericalError: if the deflator constraint fails on the surface nodes
    """
    policy = OptimalPolicy(vs, model, p, w0)
    residual = policy.constraint_residual()
    if residual > config.CONSTRAINT_TOL:
        raise NumericalError(f'deflator constraint residual {residual:.3g} exceeds {config.CONSTRAINT_TOL:g}')
    logger.debug('Extracted policy: y*=%.10g constraint residual=%.3g', policy.y_star, residual)
    return policy


def evaluate_feedback(model, p, policy, horizon, time_steps=None, space_nodes=None, tol=None, max_iter=None):
    """Value exponent y_pi(t, x) of a fixed feedback policy

    Solves the same backward equation as solve_pde with the Hamiltonian
    replaced by the generator evaluated at the policy. The feedback utility is
    w^(1-gamma) exp(y_pi(0, x0)) / (1-gamma).
    """
    require_duality_regime(p)
    K = config.PDE_TIME_STEPS if time_steps is None else int(time_steps)
    coeffs = derive_coefficients(model, p, model.diagnostic_grid(space_nodes))
    clamp = ExponentialClamp(p, coeffs.h_max, coeffs.h_min, horizon)

    def generator(t, y, z):
        return feedback_hamiltonian(p, coeffs, policy.pi(t, coeffs.x), policy.cbar(t, coeffs.x), y, z, clamp)

    solver = BackwardPDESolver(coeffs, horizon, K, generator, tol=tol, max_iter=max_iter)
    surface = solver.solve(meta={'kind': model.kind.value, 'policy': policy.label,
                                 'h_max': coeffs.h_max, 'h_min': coeffs.h_min})
    surface.meta['clamp_active'] = clamp.active
    return surface


def _path_state(model, vs, bundle, i):
    x = model.regularize(bundle.X[:, i])
    t = bundle.t_grid[i]
    return x, vs.value_at(t, x), vs.gradient_at(t, x)


def q_process(model, vs, bundle, wealth, p):
    """Log of the stochastic exponential Q with loadings L on W and L_perp on W_perp

    L = (1-gamma) pi' sigma rho + Z and L_perp = (1-gamma) pi' sigma rho_perp.
    """
    N, K, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    log_q = np.zeros((N, K + 1))
    for i in range(K):
        x, _, Yx = _path_state(model, vs, bundle, i)
        _, _, sigma, rho, _, a = model.coefficients(x)
        exposure = np.einsum('pi,pij->pj', wealth.pi[:, i], sigma)
        L = (1.0 - p.gamma) * np.einsum('pj,pj->p', exposure, rho) + Yx * a
        L_perp = (1.0 - p.gamma) * np.einsum('pk,pkj->pj', exposure, complete_correlation_stack(rho))
        log_q[:, i + 1] = (log_q[:, i] + L * bundle.dW[:, i]
                           + np.einsum('pj,pj->p', L_perp, bundle.dWperp[:, i])
                           - 0.5 * (L ** 2 + np.einsum('pj,pj->p', L_perp, L_perp)) * dt)
    return log_q


def _value_exponents(model, vs, bundle):
    Y = np.empty((bundle.n_paths, bundle.n_steps + 1))
    for i in range(bundle.n_steps + 1):
        Y[:, i] = _path_state(model, vs, bundle, i)[1]
    return Y


def _left_cumsum(values, dt):
    """sum_{i<k} values_i dt for k = 0..K"""
    out = np.zeros((values.shape[0], values.shape[1] + 1))
    out[:, 1:] = np.cumsum(values * dt, axis=1)
    return out


def pathwise_identities(model, p, policy, vs, bundle, wealth, deflator, log_q=None):
    """Sup relative discrepancies of the wealth and deflator identities along paths

    wealth:   W^(1-gamma) e^Y = w^(1-gamma) e^Y0 exp(-int (theta delta^psi e^(-psi Y/theta) - delta theta)) Q
    deflator: D^((gamma-1)/gamma) e^(Y/gamma) = e^(Y0/gamma) exp(-(theta/(gamma psi)) delta^psi int e^(-psi Y/theta)
              + delta theta t / gamma) Q
    The ratio of the two eliminates Q.
    """
    dt = bundle.dt
    log_q = q_process(model, vs, bundle, wealth, p) if log_q is None else log_q
    Y = _value_exponents(model, vs, bundle)
    y0 = policy.y0
    w = wealth.w0
    growth = p.delta ** p.psi * np.exp(-p.psi * Y[:, :-1] / p.theta)
    integral = _left_cumsum(growth, dt)
    t = bundle.t_grid[None, :]

    lhs_w = (1.0 - p.gamma) * np.log(wealth.wealth) + Y
    rhs_w = (1.0 - p.gamma) * np.log(w) + y0 - p.theta * integral + p.delta_theta * t + log_q
    lhs_d = (p.gamma - 1.0) / p.gamma * np.log(deflator.deflator) + Y / p.gamma
    rhs_d = y0 / p.gamma - p.theta / (p.gamma * p.psi) * integral + p.delta_theta * t / p.gamma + log_q

    def sup_rel(diff):
        return float(np.max(np.abs(np.expm1(diff))))

    return IdentityReport(wealth_discrepancy=sup_rel(lhs_w - rhs_w),
                          deflator_discrepancy=sup_rel(lhs_d - rhs_d),
                          ratio_discrepancy=sup_rel((lhs_w - lhs_d) - (rhs_w - rhs_d)),
                          dt=dt)


def gradient_residual(model, p, policy, vs, bundle, wealth, deflator):
    """Sup relative error between the simulated deflator and the utility-gradient formula"""
    dt = bundle.dt
    Y = _value_exponents(model, vs, bundle)
    rate = (p.theta - 1.0) * p.delta ** p.psi * np.exp(-p.psi * Y[:, :-1] / p.theta)
    log_formula = (_left_cumsum(rate, dt) - p.delta_theta * bundle.t_grid[None, :]
                   - p.gamma * np.log(wealth.wealth / wealth.w0) + Y - policy.y0)
    return float(np.max(np.abs(np.expm1(log_formula - np.log(deflator.deflator)))))


def martingale_samples(bundle, wealth, deflator):
    """Per-path (D_T W_T + sum D_i c_i dt - w) / w"""
    D = deflator.deflator
    total = D[:, -1] * wealth.wealth[:, -1] + bundle.dt * np.sum(D[:, :-1] * wealth.consumption[:, :-1], axis=1)
    return (total - wealth.w0) / wealth.w0


def run_stage(label, fn, *args, **kwargs):
    """Call fn and prefix any toolkit error with the stage label"""
    try:
        return fn(*args, **kwargs)
    except EZDualityError as exc:
        raise type(exc)(f'[{label}] {exc}') from exc


def _band(value, target, se, floor=1e-12):
    return mc_stats.within_band(value, target, se, floor=floor)


def verify_duality(model, p, w0, n_paths, n_steps, seed, horizon, threads=None, time_steps=None,
                   space_nodes=None, perturbation=None, lagrange_points=None, override=False, batches=None):
    """End-to-end duality verification with common random numbers

    Pipeline: solve -> policy -> simulate -> primal -> dual -> martingale and
    gradient checks -> Lagrange scan -> perturbed dual -> sanity gates.

    Returns:
        DualityReport; the intermediate results are reachable via report.artifacts
    """
    perturbation = config.DUAL_PERTURBATION if perturbation is None else perturbation
    lagrange_points = config.LAGRANGE_POINTS if lagrange_points is None else int(lagrange_points)
    band = config.SIGMA_BAND

    if model.is_constant:
        vs = run_stage('solve', solve_constant, p, model, horizon, time_steps)
    else:
        vs = run_stage('solve', solve_pde, p, model, horizon, time_steps, space_nodes, override=override)
    policy = run_stage('policy', extract_policy, vs, model, p, w0)
    y_star = policy.y_star

    bundle = run_stage('simulate', simulate_state, model, n_paths, n_steps, seed, horizon, threads=threads)
    wealth = run_stage('simulate', simulate_wealth, bundle, model, policy, w0)
    deflator = run_stage('simulate', simulate_deflator, bundle, model, policy)

    primal = run_stage('primal', evaluate_sdu, bundle, wealth, p, batches=batches)
    dual = run_stage('dual', evaluate_sdd, bundle, deflator, y_star, p, batches=batches)
    dual_estimate = dual.estimate + w0 * y_star
    analytic = w0 ** (1.0 - p.gamma) * np.exp(policy.y0) / (1.0 - p.gamma)
    gap = primal.estimate - dual_estimate
    gap_se = mc_stats.combined_error(primal.standard_error, dual.standard_error)

    mart = martingale_samples(bundle, wealth, deflator)
    mart_mean, mart_se = float(mart.mean()), mc_stats.standard_error(mart)
    log_q = run_stage('martingale', q_process, model, vs, bundle, wealth, p)
    q_terminal = np.exp(log_q[:, -1])
    q_mean, q_se = float(q_terminal.mean()), mc_stats.standard_error(q_terminal)
    grad = run_stage('gradient', gradient_residual, model, p, policy, vs, bundle, wealth, deflator)
    identities = run_stage('identities', pathwise_identities, model, p, policy, vs, bundle, wealth, deflator,
                        log_q=log_q)

    # V^{yD} is homogeneous of degree (gamma-1)/gamma in y, and so is its LSMC estimate
    y_grid = y_star * np.geomspace(0.5, 2.0, lagrange_points)
    lagrange = dual.estimate * (y_grid / y_star) ** ((p.gamma - 1.0) / p.gamma) + w0 * y_grid
    centre = lagrange_points // 2
    argmin = int(np.argmin(lagrange))

    perturbed = PerturbedLoadings(policy, model, perturbation)
    deflator_eps = run_stage('perturbation', simulate_deflator, bundle, model, perturbed)
    dual_eps = run_stage('perturbation', evaluate_sdd, bundle, deflator_eps, y_star, p, batches=batches)
    eps_se = mc_stats.combined_error(primal.standard_error, dual_eps.standard_error)

    increments = increment_diagnostics(bundle, model)
    bounds = None
    if p.regime() is Regime.BOTH_GT1:
        bounds = run_stage('bounds', verify_y_bounds, vs, model, p, n_paths, n_steps, seed, threads)

    flags = {
        'duality_gap': _band(primal.estimate, dual_estimate, gap_se),
        'primal_analytic': _band(primal.estimate, analytic, primal.standard_error),
        'dual_analytic': _band(dual_estimate, analytic, dual.standard_error),
        'q_martingale': _band(q_mean, 1.0, q_se),
        'martingale': _band(mart_mean, 0.0, mart_se),
        'gradient': bool(grad <= 5.0 * bundle.dt),
        'lagrange': bool(abs(argmin - centre) <= 1),
        'dual_perturbation': bool(primal.estimate <= dual_eps.estimate + w0 * y_star + band * eps_se),
        'constraint': bool(deflator.constraint_residual <= config.CONSTRAINT_TOL),
        'truncation': bool(bundle.truncation_fraction < config.MAX_TRUNCATION_FRACTION),
        'clamp_inactive': not vs.meta.get('clamp_active', False),
    }
    flags.update(increments.flags)
    if bounds is not None:
        flags.update({f'bound_{name}': ok for name, ok in bounds.flags.items()})

    report = DualityReport(
        primal_estimate=primal.estimate, primal_se=primal.standard_error,
        dual_estimate=dual_estimate, dual_se=dual.standard_error,
        analytic_value=float(analytic), y_star=float(y_star), y0=float(policy.y0),
        gap=float(gap), gap_se=gap_se,
        martingale_residual=abs(mart_mean), martingale_se=mart_se,
        gradient_residual=grad, q_mean=q_mean, q_se=q_se,
        lagrange_argmin=float(y_grid[argmin]),
        perturbed_dual_estimate=dual_eps.estimate + w0 * y_star,
        perturbed_dual_se=dual_eps.standard_error,
        perturbation=float(perturbation),
        perturbation_residual=deflator_eps.constraint_residual,
        constraint_residual=deflator.constraint_residual,
        truncation_fraction=bundle.truncation_fraction,
        primal_max_residual=primal.max_residual, dual_max_residual=dual.max_residual,
        wealth_identity=identities.wealth_discrepancy,
        deflator_identity=identities.deflator_discrepancy,
        ratio_identity=identities.ratio_discrepancy,
        n_paths=int(n_paths), n_steps=int(n_steps), seed=int(seed),
        flags=flags,
    )
    report.attach(surface=vs, policy=policy, bundle=bundle, wealth=wealth, deflator=deflator,
                  primal=primal, dual=dual, bounds=bounds, increments=increments,
                  lagrange=pd.DataFrame({'y': y_grid, 'objective': lagrange}))
    failed = report.failed_flags()
    if failed:
        logger.warning('Duality verification flags failed: %s', ', '.join(failed))
    logger.info('Duality: primal=%.10g (se %.2g) dual=%.10g (se %.2g) analytic=%.10g',
                primal.estimate, primal.standard_error, dual_estimate, dual.standard_error, analytic)
    return report
