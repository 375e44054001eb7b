"""
Shared numerical helpers for the test suite
"""

import numpy as np

from idtrack.gaussian_id import GaussianID


def random_spd(rng: np.random.Generator, n: int, cond: float = 1e3, scale: float = 1.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues log-spaced in [scale / cond, scale]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = scale * np.geomspace(1.0 / cond, 1.0, n) if n > 1 else np.array([scale])
    p = (q * eig) @ q.T
    return 0.5 * (p + p.T)


def random_sparse_id(rng: np.random.Generator, n: int, density: float = 0.5) -> GaussianID:
    """Random diagram with sparse arcs, moderate coefficients and positive variances."""
    arcs = np.triu(rng.normal(0.0, 0.7, (n, n)), k=1)
    arcs[rng.random((n, n)) > density] = 0.0
    return GaussianID(rng.normal(0.0, 3.0, n), np.triu(arcs, k=1), rng.uniform(0.1, 2.0, n))


def sample_joint(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(cov)
    return mean + (u * np.sqrt(np.clip(w, 0.0, None))) @ rng.standard_normal(mean.size)


def rel_fro(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
