#!/usr/bin/env python3
"""
Path Simulation Tests
Test Cases: TC-PATH-01 through TC-PATH-09
"""

import sys
import os
import unittest

import numpy as np

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

try:
    from backend.exceptions import NumericalError
    from backend.market import HestonParams, KimOmbergParams, MarketModel
    from backend.paths import (FeedbackPolicy, Loadings, discount_kappa, increment_diagnostics,
                               simulate_deflator, simulate_state, simulate_wealth)
    from backend.preferences import EZPreference
    from backend.utils import mc_stats
except ImportError as e:
    print(f"❌ Import error: {e}")
    print("Please ensure all required modules are available")
    sys.exit(1)


class TestPaths(unittest.TestCase):
    """Test state, wealth, deflator and discount simulation"""

    @classmethod
    def setUpClass(cls):
        cls.constant = MarketModel.constant(r=0.02, mu=[0.05], sigma=[[0.2]], rho=[0.0])
        cls.heston = MarketModel.heston(HestonParams(b=2.0, ell=0.04, a=0.3, r0=0.02, r1=0.0, lam=[2.0],
                                                     sigma=[[1.0]], rho=[-0.5], x0=0.08))
        cls.ou = MarketModel.kim_omberg(KimOmbergParams(a=0.1, b=0.5, r0=0.02, r1=0.0, lam0=[0.3],
                                                        lam1=[1.0], sigma=[[0.2]], rho=[-0.6], x0=0.5))

    def test_tc_path_01_thread_invariance(self):
        """TC-PATH-01: identical paths whatever the thread count"""
        print("\n🧪 Testing TC-PATH-01: per-path random streams")
        single = simulate_state(self.heston, 50, 20, seed=5, horizon=1.0, threads=1)
        pooled = simulate_state(self.heston, 50, 20, seed=5, horizon=1.0, threads=3)
        np.testing.assert_array_equal(single.X, pooled.X)
        np.testing.assert_array_equal(single.dWperp, pooled.dWperp)
        other = simulate_state(self.heston, 50, 20, seed=6, horizon=1.0)
        self.assertFalse(np.array_equal(single.dW, other.dW))
        prefix = simulate_state(self.heston, 10, 20, seed=5, horizon=1.0)
        np.testing.assert_array_equal(prefix.dW, single.dW[:10])
        print("✅ TC-PATH-01: per-path random streams - PASS")

    def test_tc_path_02_ou_moments(self):
        """TC-PATH-02: Ornstein-Uhlenbeck mean and variance at T"""
        bundle = simulate_state(self.ou, 20000, 100, seed=11, horizon=1.0)
        x_T = bundle.X[:, -1]
        mean = 0.5 * np.exp(-0.5)
        var = 0.1 ** 2 * (1.0 - np.exp(-1.0)) / (2.0 * 0.5)
        self.assertLessEqual(abs(x_T.mean() - mean), 3.0 * mc_stats.standard_error(x_T) + 1e-3)
        self.assertLess(abs(x_T.var(ddof=1) / var - 1.0), 0.05)
        self.assertEqual(bundle.truncation_fraction, 0.0)

    def test_tc_path_03_cir_mean(self):
        """TC-PATH-03: square-root process mean with full truncation"""
        bundle = simulate_state(self.heston, 10000, 200, seed=12, horizon=1.0)
        x_T = bundle.X[:, -1]
        mean = 0.04 + (0.08 - 0.04) * np.exp(-2.0)
        self.assertLessEqual(abs(x_T.mean() - mean), 3.0 * mc_stats.standard_error(x_T) + 5e-4)
        self.assertLess(bundle.truncation_fraction, 1e-3)

    def test_tc_path_04_wealth_log_moments(self):
        """TC-PATH-04: constant policy gives Gaussian log wealth"""
        bundle = simulate_state(self.constant, 5000, 50, seed=13, horizon=1.0)
        policy = FeedbackPolicy.constant([0.6], 0.04)
        wealth = simulate_wealth(bundle, self.constant, policy, 2.0)
        log_w = np.log(wealth.wealth[:, -1])
        drift = 0.02 + 0.6 * 0.05 - 0.04 - 0.5 * 0.36 * 0.04
        self.assertLessEqual(abs(log_w.mean() - (np.log(2.0) + drift)), 3.0 * mc_stats.standard_error(log_w))
        self.assertAlmostEqual(log_w.std(ddof=1), 0.6 * 0.2, delta=0.01)
        np.testing.assert_array_equal(wealth.consumption[:, -1], wealth.wealth[:, -1])
        np.testing.assert_allclose(wealth.consumption[:, :-1], 0.04 * wealth.wealth[:, :-1])
        self.assertEqual(wealth.pi.shape, (5000, 50, 1))

    def test_tc_path_05_deflator_martingale(self):
        """TC-PATH-05: D W is a martingale for a self-financing policy"""
        bundle = simulate_state(self.constant, 5000, 50, seed=14, horizon=1.0)
        deflator = simulate_deflator(bundle, self.constant, Loadings.constant(0.0, [-0.25]))
        self.assertLess(deflator.constraint_residual, 1e-15)
        discounted = deflator.deflator[:, -1] * np.exp(0.02)
        self.assertLessEqual(abs(discounted.mean() - 1.0), 3.0 * mc_stats.standard_error(discounted))
        wealth = simulate_wealth(bundle, self.constant, FeedbackPolicy.constant([1.0], 0.0), 1.0)
        product = deflator.deflator[:, -1] * wealth.wealth[:, -1]
        self.assertLessEqual(abs(product.mean() - 1.0), 3.0 * mc_stats.standard_error(product) + 1e-12)
        broken = simulate_deflator(bundle, self.constant, Loadings.constant(0.0, [0.0]))
        self.assertAlmostEqual(broken.constraint_residual, 0.05)

    def test_tc_path_06_discount_factors(self):
        """TC-PATH-06: constant nu discounts exactly"""
        t_grid = np.linspace(0.0, 2.0, 41)
        discount = discount_kappa(np.full((3, 41), 0.3), t_grid)
        np.testing.assert_allclose(discount.kappa[0], np.exp(-0.3 * t_grid), rtol=1e-12)
        np.testing.assert_allclose(discount.between(10, 30), np.exp(-0.3 * 1.0), rtol=1e-12)
        with self.assertRaises(NumericalError):
            discount_kappa(np.array([0.1, np.nan, 0.1]), t_grid[:3])

    def test_tc_path_07_increment_gates(self):
        """TC-PATH-07: increment mean and variance gates"""
        bundle = simulate_state(self.heston, 5000, 50, seed=15, horizon=1.0)
        report = increment_diagnostics(bundle, self.heston)
        self.assertTrue(report.flags['increment_mean'])
        self.assertTrue(report.flags['increment_variance'])
        self.assertAlmostEqual(report.variance_tol, max(0.05, 4.0 * np.sqrt(2.0 / 4999)))
        gap = abs(report.correlation[0] - (-0.5))
        self.assertLessEqual(gap, 5.0 * report.correlation_se[0])

    def test_tc_path_08_policies_and_measures(self):
        """TC-PATH-08: feedback rules, loadings and measure arguments"""
        policy = FeedbackPolicy.constant([0.2, 0.3], 0.05)
        np.testing.assert_allclose(policy.pi(0.0, np.zeros(4)), np.tile([0.2, 0.3], (4, 1)))
        np.testing.assert_allclose(policy.scaled(2.0).pi(0.0, [1.0]), [[0.4, 0.6]])
        np.testing.assert_allclose(policy.scaled(2.0).cbar(0.0, [1.0, 2.0]), [0.05, 0.05])
        loadings = Loadings.constant(0.1, [0.2, 0.3])
        self.assertEqual(loadings.eta(0.0, np.zeros(5)).shape, (5, 2))
        with self.assertRaises(ValueError):
            simulate_state(self.constant, 10, 5, seed=1, horizon=1.0, measure='risk-neutral')
        with self.assertRaises(ValueError):
            simulate_state(self.constant, 10, 5, seed=1, horizon=1.0, measure='adjusted')
        adjusted = simulate_state(self.ou, 10, 5, seed=1, horizon=1.0, measure='adjusted',
                                  p=EZPreference(0.05, 2.0, 2.0))
        physical = simulate_state(self.ou, 10, 5, seed=1, horizon=1.0)
        np.testing.assert_array_equal(adjusted.dW, physical.dW)
        self.assertFalse(np.allclose(adjusted.X, physical.X))

    def test_tc_path_09_path_export(self):
        """TC-PATH-09: path export is capped and padded"""
        bundle = simulate_state(self.heston, 30, 10, seed=2, horizon=1.0)
        frame = bundle.export_frame(limit=20)
        self.assertEqual(len(frame), 20 * 11)
        self.assertEqual(list(frame.columns), ['path_id', 't', 'X', 'dW', 'dWperp_1'])
        self.assertTrue(np.isnan(frame['dW'].iloc[10]))
        self.assertEqual(bundle.seed_scheme['generator'], 'Philox')


def run_paths_tests():
    """Run all path tests and print a summary"""
    print("=" * 80)
    print("  PATH SIMULATION - TEST SUITE")
    print("=" * 80)

    test_methods = [
        ('TC-PATH-01', 'test_tc_path_01_thread_invariance', 'Per-path random streams'),
        ('TC-PATH-02', 'test_tc_path_02_ou_moments', 'Ornstein-Uhlenbeck moments'),
        ('TC-PATH-03', 'test_tc_path_03_cir_mean', 'Square-root process mean'),
        ('TC-PATH-04', 'test_tc_path_04_wealth_log_moments', 'Log-wealth moments'),
        ('TC-PATH-05', 'test_tc_path_05_deflator_martingale', 'Deflator martingale'),
        ('TC-PATH-06', 'test_tc_path_06_discount_factors', 'Discount factors'),
        ('TC-PATH-07', 'test_tc_path_07_increment_gates', 'Increment gates'),
        ('TC-PATH-08', 'test_tc_path_08_policies_and_measures', 'Policies and measures'),
        ('TC-PATH-09', 'test_tc_path_09_path_export', 'Path export'),
    ]
    TestPaths.setUpClass()
    test_results = []
    for test_id, method_name, description in test_methods:
        outcome = unittest.TestResult()
        TestPaths(method_name).run(outcome)
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
    success = run_paths_tests()
    sys.exit(0 if success else 1)
