"""
Utility functions for the Epstein-Zin duality toolkit
"""
import logging

import numpy as np
from scipy.stats import norm

import config

logger = logging.getLogger(__name__)


class MonteCarloStats:
    """Standard errors and confidence bands for Monte Carlo estimates"""

    @staticmethod
    def standard_error(samples):
        """Standard error of the mean of i.i.d. samples"""
        samples = np.asarray(samples, dtype=float).ravel()
        if samples.size < 2:
            return 0.0
        return float(np.std(samples, ddof=1) / np.sqrt(samples.size))

    @staticmethod
    def batch_labels(n_paths, batches):
        """Assign paths to contiguous batches of (nearly) equal size"""
        batches = max(1, min(int(batches), n_paths))
        return np.arange(n_paths) * batches // n_paths

    @staticmethod
    def batch_means(samples, batches):
        samples = np.asarray(samples, dtype=float)
        labels = MonteCarloStats.batch_labels(samples.shape[0], batches)
        n_batches = labels.max() + 1
        return np.array([samples[labels == b].mean(axis=0) for b in range(n_batches)])

    @staticmethod
    def batch_standard_error(batch_estimates):
        """Standard error from independent batch estimates of the same quantity"""
        batch_estimates = np.asarray(batch_estimates, dtype=float)
        if batch_estimates.size < 2:
            return 0.0
        return float(np.std(batch_estimates, ddof=1) / np.sqrt(batch_estimates.size))

    @staticmethod
    def confidence_interval(mean, std_error, level=0.997):
        """Two-sided normal confidence interval"""
        z = norm.ppf(0.5 + level / 2.0)
        return (mean - z * std_error, mean + z * std_error)

    @staticmethod
    def combined_error(*errors):
        return float(np.sqrt(sum(e * e for e in errors)))

    @staticmethod
    def within_band(value, target, std_error, sigmas=None, floor=0.0):
        """True if |value - target| <= sigmas * std_error + floor"""
        sigmas = config.SIGMA_BAND if sigmas is None else sigmas
        return bool(abs(value - target) <= sigmas * std_error + floor)

    @staticmethod
    def warn_if_high_std_error(estimate, std_error, label):
        """Emit a warning log if the standard error is large relative to the estimate"""
        scale = max(abs(estimate), 1.0e-12)
        ratio = std_error / scale
        logger.debug('MC %s estimate=%.6g std_error=%.6g ratio=%.6g', label, estimate, std_error, ratio)
        if ratio > config.SE_WARN_RATIO:
            logger.warning('MC %s standard error high: std_error=%.6g ratio=%.6g (>%.3g)',
                           label, std_error, ratio, config.SE_WARN_RATIO)


class GridField:
    """A tabulated field on a (t, x) grid with bilinear interpolation

    values has shape (len(t_grid), len(x_grid), *trailing). Off-grid x is
    clamped to the grid range; a single-node x grid is constant in x.
    """

    def __init__(self, t_grid, x_grid, values):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[:2] != (self.t_grid.size, self.x_grid.size):
            raise ValueError(f'field shape {self.values.shape} does not match grid '
                             f'({self.t_grid.size}, {self.x_grid.size})')

    def _time_weights(self, t):
        if self.t_grid.size == 1:
            return 0, 0, 0.0
        k = int(np.clip(np.searchsorted(self.t_grid, t, side='right') - 1, 0, self.t_grid.size - 2))
        span = self.t_grid[k + 1] - self.t_grid[k]
        w = float(np.clip((t - self.t_grid[k]) / span, 0.0, 1.0))
        return k, k + 1, w

    def _row(self, k, x):
        row = self.values[k]
        if self.x_grid.size == 1:
            return np.broadcast_to(row[0], x.shape + row.shape[1:]).copy()
        xc = np.clip(x, self.x_grid[0], self.x_grid[-1])
        j = np.clip(np.searchsorted(self.x_grid, xc, side='right') - 1, 0, self.x_grid.size - 2)
        w = (xc - self.x_grid[j]) / (self.x_grid[j + 1] - self.x_grid[j])
        w = w.reshape(w.shape + (1,) * (row.ndim - 1))
        return (1.0 - w) * row[j] + w * row[j + 1]

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        k0, k1, w = self._time_weights(t)
        if w == 0.0:
            return self._row(k0, x)
        if w == 1.0:
            return self._row(k1, x)
        return (1.0 - w) * self._row(k0, x) + w * self._row(k1, x)


mc_stats = MonteCarloStats()
