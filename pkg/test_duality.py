#!/usr/bin/env python3
"""
Duality Verification Tests
Test Cases: TC-DUAL-01 through TC-DUAL-11
"""

import sys
import os
import time
import unittest

import numpy as np

# Add the project root to Python path
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, PROJECT_ROOT)

try:
    from backend.bsde import solve_constant
    from backend.duality import (PerturbedLoadings, evaluate_feedback, extract_policy, gradient_residual,
                                 martingale_samples, pathwise_identities, run_stage, verify_duality)
    from backend.exceptions import ModelError, NumericalError
    from backend.market import HestonParams, MarketModel
    from backend.paths import simulate_deflator, simulate_state, simulate_wealth
    from backend.preferences import EZPreference
    from backend.run_config import RunConfig
except ImportError as e:
    print(f"❌ Import error: {e}")
    print("Please ensure all required modules are available")
    sys.exit(1)


class TestDuality(unittest.TestCase):
    """Test policy extraction, pathwise identities and end-to-end verification"""

    @classmethod
    def setUpClass(cls):
        cls.p = EZPreference(0.05, 2.0, 2.0)
        cls.model = MarketModel.constant(r=0.02, mu=[0.05], sigma=[[0.2]], rho=[0.0])
        cls.vs = solve_constant(cls.p, cls.model, 1.0, time_steps=50)
        cls.policy = extract_policy(cls.vs, cls.model, cls.p, 1.0)
        cls.report = None
        cls.runs = None

    @classmethod
    def duality_report(cls):
        if cls.report is None:
            print("🔧 Running constant-market duality verification...")
            cls.report = verify_duality(cls.model, cls.p, 1.0, n_paths=2000, n_steps=50, seed=42,
                                        horizon=1.0, time_steps=50, lagrange_points=5, batches=10)
        return cls.report

    @classmethod
    def halving_runs(cls):
        """Policy from a fine surface and its paths at K = 25 and K = 50"""
        if cls.runs is None:
            vs = solve_constant(cls.p, cls.model, 1.0, time_steps=400)
            policy = extract_policy(vs, cls.model, cls.p, 1.0)
            runs = []
            for steps in (25, 50):
                bundle = simulate_state(cls.model, 50, steps, seed=9, horizon=1.0)
                runs.append((bundle, simulate_wealth(bundle, cls.model, policy, 1.0),
                             simulate_deflator(bundle, cls.model, policy)))
            cls.runs = (vs, policy, runs)
        return cls.runs

    def test_tc_dual_01_policy_extraction(self):
        """TC-DUAL-01: Merton weights, y* and the deflator constraint"""
        print("\n🧪 Testing TC-DUAL-01: policy extraction")
        pi, cbar, xi, eta, residual = self.policy.components(0.0, [0.0])
        self.assertAlmostEqual(pi[0, 0], 0.05 / 0.04 / 2.0, places=12)
        self.assertAlmostEqual(xi[0], 0.0, places=12)
        self.assertAlmostEqual(eta[0, 0], -0.25, places=12)
        self.assertLess(np.max(np.abs(residual)), 1e-12)
        self.assertAlmostEqual(cbar[0], 0.05 ** 2 * np.exp(self.policy.y0), places=12)
        self.assertAlmostEqual(self.policy.y_star, np.exp(self.policy.y0), places=12)
        self.assertLess(self.policy.constraint_residual(), 1e-10)
        table = self.policy.table()
        self.assertEqual(len(table), 51)
        self.assertIn('eta_1', table.columns)
        print("✅ TC-DUAL-01: policy extraction - PASS")

    def test_tc_dual_02_perturbed_loadings(self):
        """TC-DUAL-02: shifted xi keeps the deflator constraint"""
        bundle = simulate_state(self.model, 200, 20, seed=4, horizon=1.0)
        perturbed = simulate_deflator(bundle, self.model, PerturbedLoadings(self.policy, self.model, 0.1))
        self.assertLess(perturbed.constraint_residual, 1e-12)
        np.testing.assert_allclose(perturbed.xi[:, 0], 0.1, atol=1e-12)

    def test_tc_dual_03_pathwise_identities(self):
        """TC-DUAL-03: wealth and deflator identities hold to O(dt) and halve with the step"""
        bundle = simulate_state(self.model, 500, 50, seed=8, horizon=1.0)
        wealth = simulate_wealth(bundle, self.model, self.policy, 1.0)
        deflator = simulate_deflator(bundle, self.model, self.policy)
        identities = pathwise_identities(self.model, self.p, self.policy, self.vs, bundle, wealth, deflator)
        for value in (identities.wealth_discrepancy, identities.deflator_discrepancy,
                      identities.ratio_discrepancy):
            self.assertLess(value, 10.0 * bundle.dt)
        mart = martingale_samples(bundle, wealth, deflator)
        self.assertEqual(mart.shape, (500,))

        vs, policy, runs = self.halving_runs()
        coarse, fine = [pathwise_identities(self.model, self.p, policy, vs, *run) for run in runs]
        for field in ('wealth_discrepancy', 'deflator_discrepancy'):
            ratio = getattr(coarse, field) / getattr(fine, field)
            self.assertTrue(1.5 <= ratio <= 3.0, (field, getattr(coarse, field), getattr(fine, field)))

    def test_tc_dual_04_feedback_suboptimality(self):
        """TC-DUAL-04: scaled portfolios raise the value exponent above Y"""
        y0 = self.vs.y0(0.0)
        same = evaluate_feedback(self.model, self.p, self.policy, 1.0, time_steps=200)
        self.assertAlmostEqual(same.y0(0.0), y0, delta=1e-6)
        for factor in (0.0, 0.75, 1.25, 2.0):
            surface = evaluate_feedback(self.model, self.p, self.policy.scaled(factor), 1.0, time_steps=50)
            self.assertGreaterEqual(surface.y0(0.0), y0 + 1e-6, factor)

    def test_tc_dual_05_run_stage(self):
        """TC-DUAL-05: stage labels prefix toolkit errors"""
        def fail():
            raise NumericalError('lost precision')
        with self.assertRaises(NumericalError) as ctx:
            run_stage('primal', fail)
        self.assertEqual(str(ctx.exception), '[primal] lost precision')
        self.assertEqual(run_stage('noop', lambda value: value + 1, 1), 2)
        with self.assertRaises(ZeroDivisionError):
            run_stage('other', lambda: 1 / 0)

    def test_tc_dual_06_verify_constant_market(self):
        """TC-DUAL-06: primal and dual agree with the closed form"""
        report = self.duality_report()
        for flag in ('duality_gap', 'primal_analytic', 'dual_analytic', 'martingale', 'q_martingale',
                     'gradient', 'lagrange', 'constraint', 'dual_perturbation', 'clamp_inactive'):
            self.assertTrue(report.flags[flag], flag)
        self.assertLessEqual(abs(report.gap), 3.0 * report.gap_se + 1e-4 * abs(report.analytic_value))
        self.assertLess(report.primal_max_residual, 1e-8)
        self.assertEqual(report.n_paths, 2000)
        self.assertEqual(len(report.artifacts['lagrange']), 5)

    def test_tc_dual_07_report_views(self):
        """TC-DUAL-07: flat key-value view of the report"""
        rows = self.duality_report().key_values()
        self.assertIn('flag_duality_gap', rows)
        self.assertIn('primal_estimate', rows)
        self.assertNotIn('flags', rows)
        with self.assertRaises(ModelError):
            verify_duality(MarketModel.constant(r=0.02, mu=[0.05, 0.05], sigma=[[0.2, 0.2], [0.2, 0.2]],
                                                rho=[0.0, 0.0]),
                           self.p, 1.0, n_paths=10, n_steps=5, seed=1, horizon=1.0, time_steps=5)

    def test_tc_dual_08_gradient_halving(self):
        """TC-DUAL-08: the utility-gradient residual is first order in the step"""
        vs, policy, runs = self.halving_runs()
        residuals = [gradient_residual(self.model, self.p, policy, vs, *run) for run in runs]
        self.assertLessEqual(residuals[1], 5.0 / 50)
        self.assertTrue(1.5 <= residuals[0] / residuals[1] <= 3.0, residuals)

    def test_tc_dual_09_suboptimality_gamma_below_one(self):
        """TC-DUAL-09: with gamma < 1 scaled portfolios lower the value exponent"""
        p = EZPreference(0.05, 0.5, 4.0)
        vs = solve_constant(p, self.model, 1.0, time_steps=50)
        policy = extract_policy(vs, self.model, p, 1.0)
        y0 = vs.y0(0.0)
        for factor in (0.0, 0.75, 1.25, 2.0):
            surface = evaluate_feedback(self.model, p, policy.scaled(factor), 1.0, time_steps=50)
            self.assertLessEqual(surface.y0(0.0), y0 - 1e-6, factor)

    def assert_duality_holds(self, report):
        for flag, passed in report.flags.items():
            self.assertTrue(passed, flag)
        self.assertLessEqual(abs(report.gap), 3.0 * report.gap_se)
        self.assertLessEqual(abs(report.primal_estimate - report.analytic_value), 3.0 * report.primal_se)
        self.assertLessEqual(abs(report.dual_estimate - report.analytic_value), 3.0 * report.dual_se)

    def test_tc_dual_10_shipped_constant_run(self):
        """TC-DUAL-10: correlated constant market from configs/constant.ini, 10^4 paths and 200 steps"""
        cfg = RunConfig.from_file(os.path.join(PROJECT_ROOT, 'configs', 'constant.ini'))
        np.testing.assert_array_equal(cfg.model.params.rho, [0.5])
        self.assertEqual((cfg.mc['paths'], cfg.mc['steps']), (10000, 200))
        start = time.perf_counter()
        report = verify_duality(cfg.model, cfg.preference, cfg.wealth, cfg.mc['paths'], cfg.mc['steps'],
                                cfg.mc['seed'], cfg.horizon, time_steps=cfg.solver['time_steps'],
                                batches=cfg.mc['batches'])
        elapsed = time.perf_counter() - start
        print(f"   📝 gap {report.gap:.3g} (se {report.gap_se:.3g}) in {elapsed:.1f}s")
        self.assert_duality_holds(report)
        self.assertLess(elapsed, 60.0)

    def test_tc_dual_11_heston_duality(self):
        """TC-DUAL-11: stochastic volatility market accepted by the checker, 10^4 paths"""
        model = MarketModel.heston(HestonParams(b=2.0, ell=0.04, a=0.3, r0=0.02, r1=0.0, lam=[2.0],
                                                sigma=[[1.0]], rho=[-0.5], x0=0.04))
        report = verify_duality(model, self.p, 1.0, n_paths=10000, n_steps=100, seed=42, horizon=1.0,
                                time_steps=100, space_nodes=100, batches=20)
        print(f"   📝 gap {report.gap:.3g} (se {report.gap_se:.3g})")
        self.assert_duality_holds(report)
        self.assertLessEqual(report.martingale_residual, 3.0 * report.martingale_se)
        self.assertIn('bound_lower_bound', report.flags)


def run_duality_tests():
    """Run all duality tests and print a summary"""
    print("=" * 80)
    print("  DUALITY VERIFICATION - TEST SUITE")
    print("=" * 80)

    test_methods = [
        ('TC-DUAL-01', 'test_tc_dual_01_policy_extraction', 'Policy extraction'),
        ('TC-DUAL-02', 'test_tc_dual_02_perturbed_loadings', 'Perturbed loadings'),
        ('TC-DUAL-03', 'test_tc_dual_03_pathwise_identities', 'Pathwise identities'),
        ('TC-DUAL-04', 'test_tc_dual_04_feedback_suboptimality', 'Feedback suboptimality'),
        ('TC-DUAL-05', 'test_tc_dual_05_run_stage', 'Stage labels'),
        ('TC-DUAL-06', 'test_tc_dual_06_verify_constant_market', 'End-to-end verification'),
        ('TC-DUAL-07', 'test_tc_dual_07_report_views', 'Report views'),
        ('TC-DUAL-08', 'test_tc_dual_08_gradient_halving', 'Gradient residual order'),
        ('TC-DUAL-09', 'test_tc_dual_09_suboptimality_gamma_below_one', 'Suboptimality, gamma < 1'),
        ('TC-DUAL-10', 'test_tc_dual_10_shipped_constant_run', 'Shipped constant run'),
        ('TC-DUAL-11', 'test_tc_dual_11_heston_duality', 'Heston duality'),
    ]
    TestDuality.setUpClass()
    test_results = []
    for test_id, method_name, description in test_methods:
        outcome = unittest.TestResult()
        TestDuality(method_name).run(outcome)
        problems = outcome.failures + outcome.errors
        status = 'FAIL' if problems else 'PASS'
        test_results.append((test_id, description, status,
                             problems[0][1].strip().splitlines()[-1] if problems else ''))

    print("\n" + "=" * 80)
    print("  TEST RESULTS SUMMARY")
    print("=" * 80)
    failed = 0
    for test_id, description, status, message in test_results:
        if status == 'PASS':
            print(f"✅ {test_id}: {description} - {status}")
        else:
            failed += 1
            print(f"❌ {test_id}: {description} - {status}")
            print(f"   📝 Error: {message}")
    print(f"\n📊 OVERALL RESULTS: {len(test_results) - failed}/{len(test_results)} passed")
    print("=" * 80)
    return failed == 0


if __name__ == "__main__":
    success = run_duality_tests()
    sys.exit(0 if success else 1)
