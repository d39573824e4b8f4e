"""Data model, deterministic RNG plumbing, and SPD linear algebra primitives.

Everything downstream (tests, covariance correction, drift regression,
metrics, simulation) builds on the small vocabulary defined here:

* ``BatchedDataset``   immutable container for a multi-batch intensity table
* ``SpdMatrix``        symmetric positive definite matrix with its eigen floor
* ``RngStream``        counter-based random stream, splittable and replayable
* ``mean_center`` / ``autoscale`` / ``empirical_cov``   column statistics
* ``spd_sqrt`` / ``spd_inv_sqrt``   eigendecomposition square roots
* ``ar1_correlation``  first-order autoregressive correlation matrix
* ``mvn_sample``       deterministic multivariate normal draws

All operations are pure functions of immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Relative eigenvalue floor that defines "positive definite" everywhere in
# the package; anything smaller turns into noise once inverse square roots
# get involved.
EIGEN_FLOOR_REL = 1e-12

_MASK64 = (1 << 64) - 1
_GOLDEN64 = 0x9E3779B97F4A7C15

QC = "qc"
SUBJECT = "subject"


class DebatchError(Exception):
    """Base class for package-specific failures."""


class DegenerateColumnError(DebatchError):
    """A column has zero sample variance where scaling requires spread."""

    def __init__(self, columns: Sequence[int]):
        self.columns = tuple(int(c) for c in columns)
        super().__init__(
            f"zero-variance column(s) at index {list(self.columns)}"
        )


class NotPositiveDefiniteError(DebatchError):
    """Smallest eigenvalue fell below the positive-definite floor."""

    def __init__(self, eigenvalue: float, floor: float):
        self.eigenvalue = float(eigenvalue)
        self.floor = float(floor)
        super().__init__(
            f"matrix is not positive definite: smallest eigenvalue "
            f"{eigenvalue:.6e} is below the floor {floor:.6e}"
        )


class ContractViolationError(DebatchError):
    """An input violated a documented precondition."""


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN64) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream addressed by (master_seed, stream_id).

    Identical field values always reproduce identical draw sequences, and
    distinct stream ids give statistically independent streams (the
    generator is counter-based, so streams can be consumed in any order or
    in parallel without changing results).
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {type(v)!r}")
            if not 0 <= int(v) < (1 << 64):
                raise ValueError(f"{name} must fit in 64 bits, got {v}")
            object.__setattr__(self, name, int(v))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_id,)
        )
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "RngStream":
        """Derive the index-th substream, itself splittable further."""
        if index < 0:
            raise ValueError(f"substream index must be >= 0, got {index}")
        base = _splitmix64(self.stream_id)
        mixed = _splitmix64((base + (index + 1) * _GOLDEN64) & _MASK64)
        return RngStream(self.master_seed, mixed)

    def children(self, count: int) -> list["RngStream"]:
        return [self.child(i) for i in range(count)]


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric positive definite matrix plus its smallest eigenvalue.

    Construction verifies symmetry (1e-10 relative) and positivity; use
    ``entries`` for raw array access.
    """

    entries: np.ndarray
    eigen_floor: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.array(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {arr.shape}")
        scale = max(1.0, float(np.abs(arr).max()))
        asym = float(np.abs(arr - arr.T).max())
        if asym > 1e-10 * scale:
            raise ContractViolationError(
                f"matrix is not symmetric: max asymmetry {asym:.3e} "
                f"exceeds 1e-10 relative"
            )
        arr = (arr + arr.T) / 2.0
        arr.setflags(write=False)
        eigvals = np.linalg.eigvalsh(arr)
        smallest = float(eigvals[0])
        if smallest <= 0.0:
            raise NotPositiveDefiniteError(smallest, 0.0)
        object.__setattr__(self, "entries", arr)
        object.__setattr__(self, "eigen_floor", smallest)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def _as_matrix(X, name: str = "X") -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class BatchedDataset:
    """Multi-batch intensity table with sample roles and injection order.

    Rows are samples, columns are measured variables.  ``role`` flags each
    row as a pooled quality-control sample ("qc") or a study subject
    ("subject").  Within a batch the injection orders must be strictly
    increasing with row order, which pins down run sequence without
    storing timestamps.
    """

    values: np.ndarray
    sample_ids: tuple
    batch: tuple
    role: tuple
    injection_order: np.ndarray

    def __post_init__(self):
        vals = _as_matrix(self.values, "values")
        vals = vals.copy()
        vals.setflags(write=False)
        n = vals.shape[0]
        ids = tuple(str(s) for s in self.sample_ids)
        bat = tuple(str(b) for b in self.batch)
        rol = tuple(str(r).strip().lower() for r in self.role)
        order = np.asarray(self.injection_order, dtype=np.int64)
        order = order.copy()
        order.setflags(write=False)
        if not (len(ids) == len(bat) == len(rol) == order.shape[0] == n):
            raise ValueError(
                "values, sample_ids, batch, role and injection_order must "
                "all describe the same number of rows"
            )
        bad = sorted(set(rol) - {QC, SUBJECT})
        if bad:
            raise ValueError(f"role labels must be 'qc' or 'subject', got {bad}")
        if (order <= 0).any():
            raise ValueError("injection_order entries must be positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "batch", bat)
        object.__setattr__(self, "role", rol)
        object.__setattr__(self, "injection_order", order)
        for label in self.batches:
            idx = self.indices(label)
            seq = order[idx]
            if (np.diff(seq) <= 0).any():
                raise ValueError(
                    f"injection orders in batch {label!r} must be strictly "
                    f"increasing with row order"
                )
            if int((np.array(rol)[idx] == QC).sum()) < 2:
                raise ValueError(
                    f"batch {label!r} must contain at least 2 qc samples"
                )

    @property
    def n_total(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def batches(self) -> tuple:
        """Distinct batch labels in order of first appearance."""
        seen: dict = {}
        for b in self.batch:
            seen.setdefault(b, None)
        return tuple(seen.keys())

    def mask(self, batch=None, role=None) -> np.ndarray:
        m = np.ones(self.n_total, dtype=bool)
        if batch is not None:
            m &= np.array([b == str(batch) for b in self.batch])
        if role is not None:
            m &= np.array([r == role for r in self.role])
        return m

    def indices(self, batch=None, role=None) -> np.ndarray:
        return np.flatnonzero(self.mask(batch, role))

    def qc_values(self, batch=None) -> np.ndarray:
        return self.values[self.mask(batch, QC)]

    def subject_values(self, batch=None) -> np.ndarray:
        return self.values[self.mask(batch, SUBJECT)]

    def with_values(self, new_values: np.ndarray) -> "BatchedDataset":
        """Same metadata, new measurement matrix of identical shape."""
        arr = _as_matrix(new_values, "new_values")
        if arr.shape != self.values.shape:
            raise ValueError(
                f"replacement values must keep shape {self.values.shape}, "
                f"got {arr.shape}"
            )
        return BatchedDataset(
            arr, self.sample_ids, self.batch, self.role, self.injection_order
        )

    def subset(self, row_mask: np.ndarray) -> "BatchedDataset":
        idx = np.flatnonzero(np.asarray(row_mask, dtype=bool))
        return BatchedDataset(
            self.values[idx],
            tuple(self.sample_ids[i] for i in idx),
            tuple(self.batch[i] for i in idx),
            tuple(self.role[i] for i in idx),
            self.injection_order[idx],
        )


def mean_center(X) -> tuple[np.ndarray, np.ndarray]:
    """Center columns; return (centered matrix, column mean vector)."""
    arr = _as_matrix(X)
    means = arr.mean(axis=0)
    return arr - means, means


def autoscale(X) -> np.ndarray:
    """Scale each column to mean 0 and unit sample variance (n-1 form)."""
    arr = _as_matrix(X)
    if arr.shape[0] < 2:
        raise ValueError("autoscale needs at least 2 rows")
    centered, _ = mean_center(arr)
    sd = centered.std(axis=0, ddof=1)
    dead = np.flatnonzero(sd == 0.0)
    if dead.size:
        raise DegenerateColumnError(dead)
    return centered / sd


def empirical_cov(X, denominator: str = "n-1") -> np.ndarray:
    """Covariance of a mean-centered matrix, XtX over n-1 or over n.

    The denominator stays an explicit argument because both conventions
    are load-bearing downstream: n-1 for test statistics, n (the MLE form)
    for the precision-matrix solver input.
    """
    arr = _as_matrix(X)
    n = arr.shape[0]
    if denominator not in ("n-1", "n"):
        raise ValueError(f"denominator must be 'n-1' or 'n', got {denominator!r}")
    if denominator == "n-1" and n < 2:
        raise ValueError("the n-1 denominator needs at least 2 rows")
    col_means = np.abs(arr.mean(axis=0))
    if col_means.max() > 1e-8:
        raise ContractViolationError(
            f"empirical_cov expects mean-centered input; worst column mean "
            f"is {col_means.max():.3e}"
        )
    div = n - 1 if denominator == "n-1" else n
    cov = arr.T @ arr / div
    return (cov + cov.T) / 2.0


def _eig_spd(S, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    wrap = isinstance(S, SpdMatrix)
    arr = S.entries if wrap else np.asarray(S, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} expects a square matrix, got {arr.shape}")
    scale = max(1.0, float(np.abs(arr).max()))
    if float(np.abs(arr - arr.T).max()) > 1e-10 * scale:
        raise ContractViolationError(f"{name} expects a symmetric matrix")
    w, V = np.linalg.eigh((arr + arr.T) / 2.0)
    floor = EIGEN_FLOOR_REL * float(w[-1])
    if w[0] <= floor:
        raise NotPositiveDefiniteError(float(w[0]), floor)
    return w, V, arr


def _maybe_wrap(result: np.ndarray, like) -> np.ndarray | SpdMatrix:
    result = (result + result.T) / 2.0
    if isinstance(like, SpdMatrix):
        return SpdMatrix(result)
    return result


def spd_sqrt(S):
    """Symmetric square root via eigendecomposition."""
    w, V, _ = _eig_spd(S, "spd_sqrt")
    root = (V * np.sqrt(w)) @ V.T
    return _maybe_wrap(root, S)


def spd_inv_sqrt(S):
    """Symmetric inverse square root via eigendecomposition."""
    w, V, _ = _eig_spd(S, "spd_inv_sqrt")
    root = (V / np.sqrt(w)) @ V.T
    return _maybe_wrap(root, S)


def ar1_correlation(rho: float, p: int) -> np.ndarray:
    """First-order autoregressive correlation: entry (k,l) = rho^|k-l|."""
    if not np.isfinite(rho) or abs(rho) > 1.0:
        raise ValueError(f"rho must satisfy |rho| <= 1, got {rho}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if rho == 0.0:
        return np.eye(p)
    idx = np.arange(p)
    return np.float_power(rho, np.abs(idx[:, None] - idx[None, :]))


def mvn_sample(mu, sigma, n: int, rng: RngStream) -> np.ndarray:
    """Draw n rows from N_p(mu, sigma), a pure function of the stream.

    Uses X = Z sigma^{1/2} + mu with Z standard normal, so the draw is
    reproducible bit for bit from (mu, sigma, n, rng).
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    if mu.ndim != 1:
        raise ValueError("mu must be a vector")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    root = spd_sqrt(sigma)
    arr = root.entries if isinstance(root, SpdMatrix) else root
    if arr.shape[0] != mu.shape[0]:
        raise ValueError(
            f"mu has length {mu.shape[0]} but sigma is {arr.shape[0]}x{arr.shape[0]}"
        )
    Z = rng.generator().standard_normal((n, mu.shape[0]))
    return Z @ arr + mu
