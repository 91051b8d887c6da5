from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PCAResult:
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    projections: np.ndarray  # (n, k)


def pca(X, k: int) -> PCAResult:
    """Principal components of the mean-centred rows of ``X``.

    Components come out in order of decreasing explained variance, each with
    its largest-magnitude entry positive so results are reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca needs a matrix with at least two rows")
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} out of range [1, {min(n, d)}]")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k].copy()
    flip = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    flip[flip == 0] = 1.0
    comps *= flip[:, None]
    var = s**2 / (n - 1)
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(comps, var[:k], ratio, mean, centered @ comps.T)
