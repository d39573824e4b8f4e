"""Guided-PCA permutation test for batch effects.

The statistic compares the leading variance direction of the batch-mean
matrix (the "guided" direction, which can only express between-batch
structure) against the leading variance direction of the data itself.
When batches are exchangeable the two directions explain similar variance
and the ratio is unremarkable against its permutation distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from debatch.core import RngStream, autoscale


@dataclass(frozen=True)
class GpcaOutcome:
    """Result of one guided-PCA permutation test."""

    delta: float
    p_value: float
    n_perm: int

    def __post_init__(self):
        if self.delta < 0.0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        lo = 1.0 / (self.n_perm + 1)
        if not lo <= self.p_value <= 1.0:
            raise ValueError(
                f"p_value must lie in [{lo}, 1], got {self.p_value}"
            )


def _leading_right_singular_vector(M: np.ndarray) -> np.ndarray:
    # rows <= columns in every call site, so work with the small Gram side
    MMt = M @ M.T
    w, V = np.linalg.eigh(MMt)
    u = V[:, -1]
    v = M.T @ u
    norm = np.linalg.norm(v)
    if norm == 0.0:
        # degenerate guided matrix (all batch means equal); any unit vector
        # yields zero projected variance
        v = np.zeros(M.shape[1])
        v[0] = 1.0
        return v
    return v / norm


def _guided_delta(X: np.ndarray, codes: np.ndarray, B: int, denom: float) -> float:
    means = np.empty((B, X.shape[1]))
    for b in range(B):
        means[b] = X[codes == b].mean(axis=0)
    v = _leading_right_singular_vector(means)
    proj = X @ v
    return float(proj.var(ddof=1)) / denom


def gpca_test(
    X,
    batch: Sequence,
    n_perm: int = 1000,
    rng: Optional[RngStream] = None,
) -> GpcaOutcome:
    """Permutation test of batch structure via guided principal components.

    The data are autoscaled, then delta = var(X v_guided) / var(X v_data)
    is referred to its distribution under random batch-label permutations.
    The p-value uses the add-one convention (1 + #{perm >= observed}) /
    (n_perm + 1), so its smallest attainable value is 1/(n_perm+1).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d matrix")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite entries")
    labels = np.asarray(batch)
    if labels.shape != (X.shape[0],):
        raise ValueError("batch must supply one label per row of X")
    if n_perm < 1:
        raise ValueError(f"n_perm must be >= 1, got {n_perm}")
    uniq, codes = np.unique(labels, return_inverse=True)
    B = uniq.size
    if B < 2:
        raise ValueError("gpca_test needs at least 2 batches")
    counts = np.bincount(codes)
    if counts.min() < 2:
        raise ValueError("every batch needs at least 2 samples")
    if rng is None:
        rng = RngStream(master_seed=0)

    Xs = autoscale(X)
    v_data = _leading_right_singular_vector(Xs)
    denom = float((Xs @ v_data).var(ddof=1))
    if denom <= 0.0:
        raise ValueError("data have no variance along the leading direction")

    observed = _guided_delta(Xs, codes, B, denom)

    gen = rng.generator()
    exceed = 0
    for _ in range(n_perm):
        perm = gen.permutation(codes)
        if _guided_delta(Xs, perm, B, denom) >= observed:
            exceed += 1
    p = (1.0 + exceed) / (n_perm + 1.0)
    return GpcaOutcome(delta=observed, p_value=float(p), n_perm=int(n_perm))
