"""Independent numerical oracles used by the tests.

The 1-D Gaussian case: data actions x1 ~ N(2, 0.25), noise x0 ~ N(0, 1),
linear path x_t = (1-t) x0 + t x1.  A trained velocity field should predict
E[x1 - x0 | x_t, t].  The Monte-Carlo oracle estimates that conditional mean
by kernel regression over a large sample pool (binned for speed); the closed
form for the jointly Gaussian pair cross-checks the oracle itself.
"""

import numpy as np

X1_MEAN = 2.0
X1_VAR = 0.25


def analytic_conditional_mean(x, t):
    """E[x1 - x0 | x_t = x] for the Gaussian case, in closed form."""
    t = np.asarray(t, dtype=np.float64)
    m_t = t * X1_MEAN
    v_t = (1.0 - t) ** 2 + X1_VAR * t**2
    cov = -(1.0 - t) + X1_VAR * t
    return X1_MEAN + cov / v_t * (np.asarray(x) - m_t)


class GaussianCaseOracle:
    """Binned Nadaraya-Watson estimate of E[x1 - x0 | x_t, t] on a dense grid."""

    def __init__(self, n_samples: int = 1_000_000, seed: int = 510,
                 t_values=None, bandwidth: float = 0.05, bin_width: float = 0.01):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal(n_samples)
        x1 = X1_MEAN + np.sqrt(X1_VAR) * rng.standard_normal(n_samples)
        u = x1 - x0
        self.bandwidth = bandwidth
        self.t_values = np.asarray(
            t_values if t_values is not None else np.linspace(0.05, 0.95, 10)
        )
        self._grids = {}
        self._means = {}
        for t in self.t_values:
            x_t = (1.0 - t) * x0 + t * x1
            m_t = t * X1_MEAN
            s_t = np.sqrt((1.0 - t) ** 2 + X1_VAR * t**2)
            lo, hi = m_t - 4.5 * s_t, m_t + 4.5 * s_t
            edges = np.arange(lo, hi + bin_width, bin_width)
            centers = 0.5 * (edges[:-1] + edges[1:])
            idx = np.clip(np.digitize(x_t, edges) - 1, 0, len(centers) - 1)
            counts = np.bincount(idx, minlength=len(centers)).astype(np.float64)
            sums = np.bincount(idx, weights=u, minlength=len(centers))
            # kernel-smooth the binned statistics
            half = int(np.ceil(4 * bandwidth / bin_width))
            offsets = np.arange(-half, half + 1) * bin_width
            k = np.exp(-0.5 * (offsets / bandwidth) ** 2)
            num = np.convolve(sums, k, mode="same")
            den = np.convolve(counts, k, mode="same")
            mean = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
            self._grids[float(t)] = centers
            self._means[float(t)] = mean

    def nearest_t(self, t: float) -> float:
        return float(self.t_values[np.argmin(np.abs(self.t_values - t))])

    def mean_velocity(self, x, t: float):
        """Interpolated conditional-mean estimate at (x, t); t must be one
        of the oracle's t values."""
        key = float(t)
        if key not in self._grids:
            raise KeyError(f"t={t} not in oracle grid {self.t_values}")
        return np.interp(np.asarray(x, dtype=np.float64),
                         self._grids[key], self._means[key])

    def bulk_points(self, t: float, n: int = 9, width: float = 1.5) -> np.ndarray:
        """Query points covering mean +- width*sigma of x_t at time t."""
        m_t = t * X1_MEAN
        s_t = np.sqrt((1.0 - t) ** 2 + X1_VAR * t**2)
        return np.linspace(m_t - width * s_t, m_t + width * s_t, n)
