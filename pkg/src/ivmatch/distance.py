"""Rank-based robust Mahalanobis distance within one stratum."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

PINV_RTOL = 1e-10


@dataclass
class DistanceMatrix:
    key: tuple[str, ...]
    values: np.ndarray
    singular: bool = False
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]

    def pairwise(self) -> np.ndarray:
        """Distances for every l < m in row-major pair order."""
        iu = np.triu_indices(self.size, k=1)
        return self.values[iu]

    def median(self) -> float:
        d = self.pairwise()
        return float(np.median(d)) if d.size else 0.0

    def to_csv(self) -> str:
        ids = self.ids or [str(i) for i in range(self.size)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *ids])
        for uid, row in zip(ids, self.values):
            writer.writerow([uid, *(f"{x:.10g}" for x in row)])
        return buf.getvalue()


def robust_mahalanobis(covariates: Sequence[Sequence[float]] | np.ndarray,
                       key: tuple[str, ...] = (), ids: Sequence[str] | None = None) -> DistanceMatrix:
    """Mahalanobis distance between rows after replacing each column by ranks.

    Ties get average ranks.  The rank covariance is rescaled so every
    nonconstant column has the variance of untied ranks, (L^2 - 1)/12,
    keeping the correlations; constant columns are zeroed and drop out
    through the pseudo-inverse.
    """
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 units, got {n}")
    if k < 1:
        raise ValueError("need at least one covariate")

    ranks = np.column_stack([rankdata(x[:, j]) for j in range(k)])
    centered = ranks - ranks.mean(axis=0)
    cov = centered.T @ centered / n
    target = (n * n - 1) / 12.0
    sd = np.sqrt(np.diag(cov))
    scale = np.divide(np.sqrt(target), sd, out=np.zeros(k), where=sd > 0)
    cov = cov * np.outer(scale, scale)
    # Constant columns contribute nothing; rank differences there are 0.
    inv = np.linalg.pinv(cov, rcond=PINV_RTOL, hermitian=True)
    rank = np.linalg.matrix_rank(cov, tol=PINV_RTOL * max(np.abs(cov).max(), 1.0))
    singular = rank < k
    if singular:
        log.debug("stratum %s: rank covariance singular (rank %d of %d)", key, rank, k)

    dist = np.empty((n, n))
    block = max(1, 4_000_000 // max(n * k, 1))
    for start in range(0, n, block):
        diff = ranks[start:start + block, None, :] - ranks[None, :, :]
        dist[start:start + block] = np.einsum("lmi,ij,lmj->lm", diff, inv, diff)
    dist = np.maximum((dist + dist.T) / 2.0, 0.0)
    np.fill_diagonal(dist, 0.0)
    return DistanceMatrix(key=tuple(key), values=dist, singular=bool(singular),
                          ids=list(ids) if ids is not None else [])
