"""debatch: detect and correct batch effects in multi-batch tabular data.

The package covers the full loop: simultaneous high-dimensional tests for
mean and covariance differences between batches (anchored on pooled QC
samples), a guided-PCA permutation baseline, penalized precision-matrix
estimation driving a covariance-correcting transformation, boosted-tree
signal drift correction with QC-median rescaling, quality metrics, a Monte
Carlo harness for size and power studies, and a command line interface.
"""

from debatch._backend import backend_name, set_backend
from debatch.core import (
    QC,
    SUBJECT,
    BatchedDataset,
    ContractViolationError,
    DebatchError,
    DegenerateColumnError,
    NotPositiveDefiniteError,
    RngStream,
    SpdMatrix,
    ar1_correlation,
    autoscale,
    empirical_cov,
    mean_center,
    mvn_sample,
    spd_inv_sqrt,
    spd_sqrt,
)

__version__ = "0.1.0"

__all__ = [
    "QC",
    "SUBJECT",
    "BatchedDataset",
    "ContractViolationError",
    "DebatchError",
    "DegenerateColumnError",
    "NotPositiveDefiniteError",
    "RngStream",
    "SpdMatrix",
    "ar1_correlation",
    "autoscale",
    "backend_name",
    "empirical_cov",
    "mean_center",
    "mvn_sample",
    "set_backend",
    "spd_inv_sqrt",
    "spd_sqrt",
    "__version__",
]
