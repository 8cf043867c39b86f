import numpy as np
import pytest


def full_fd_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central finite differences of a scalar function."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2.0 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture(scope="session")
def bandit_dataset():
    from decisionflow.dataset import gen_dataset

    return gen_dataset("bandit", n_episodes=3000, seed=11)


@pytest.fixture(scope="session")
def pointmass_dataset():
    from decisionflow.dataset import gen_dataset

    return gen_dataset("pointmass", n_episodes=400, seed=12)
