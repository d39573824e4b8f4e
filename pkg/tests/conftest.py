"""Shared synthetic-data builders for the CLI and acceptance tests."""

import numpy as np

from debatch.cli import write_dataset
from debatch.core import BatchedDataset


def three_batch_dataset(
    seed,
    gains=(1.0, 1.25, 0.8),
    rhos=(0.4, 0.0, -0.4),
    drift=0.25,
    B=3,
    n_qc=24,
    n_sub=12,
    p=16,
    noise_rsd=0.08,
) -> BatchedDataset:
    """Three batches with level shifts, signal drift, and a correlation flip.

    Every third injection is a subject sample with extra biological
    spread; the rest are pooled QC.  ``gains`` scale whole batches,
    ``drift`` bounds a linear per-variable trend over injection order,
    and ``rhos`` set each batch's AR(1) noise correlation.
    """
    gen = np.random.default_rng(seed)
    base = gen.uniform(100.0, 200.0, p)
    slopes = gen.uniform(-drift, drift, (B, p)) if drift else np.zeros((B, p))
    n = n_qc + n_sub
    rows, ids, batches, roles, orders = [], [], [], [], []
    for b in range(B):
        rho = rhos[b]
        R = np.eye(p) if rho == 0 else np.array(
            [[rho ** abs(i - j) for j in range(p)] for i in range(p)]
        )
        s = noise_rsd * base
        L = np.linalg.cholesky((s[:, None] * R) * s[None, :])
        for t in range(1, n + 1):
            drift_f = 1.0 + slopes[b] * (t - (n + 1) / 2) / n
            z = gen.standard_normal(p)
            if t % 3 == 0:
                core = base * gen.uniform(0.8, 1.2, p) + L @ z * 1.5
                role = "subject"
            else:
                core = base + L @ z
                role = "qc"
            rows.append(core * gains[b] * drift_f)
            ids.append(f"b{b + 1}_s{t}")
            batches.append(f"b{b + 1}")
            roles.append(role)
            orders.append(t)
    return BatchedDataset(
        values=np.vstack(rows),
        sample_ids=tuple(ids),
        batch=tuple(batches),
        role=tuple(roles),
        injection_order=np.array(orders, dtype=np.int64),
    )


def three_batch_csv(path, seed, **kwargs) -> None:
    dataset = three_batch_dataset(seed, **kwargs)
    names = [f"m{i + 1}" for i in range(dataset.p)]
    write_dataset(dataset, path, names)
