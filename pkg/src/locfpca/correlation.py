"""Between-replicate correlation estimation from dissociation statistics.

For each pair of replicates (j, k) the dissociation statistic aggregates
squared cross-time products of the difference curves Y_ij - Y_ik.  It is
proportional to (1 - rho_jk) plus a noise floor, so the largest statistics
identify pairs whose replicate-level deviations are uncorrelated; those
pairs calibrate the correlation estimate for everything else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import FunctionalDataset
from .errors import DegenerateDenominator, EmptyDeltaSet


@dataclass
class ReplicateCorrelation:
    """Estimated replicate correlation matrix with its supporting statistics.

    Attributes
    ----------
    rho : ndarray (J, J)
        Symmetric, unit diagonal, entries clamped to [-1, 1].  Pairs in
        ``delta_set`` are exactly zero.
    F_hat : ndarray (J, J)
        Dissociation statistics, zero diagonal.
    delta : float
        Quantile level used to pick the calibration set.
    delta_set : tuple of (j, k)
        0-based pairs (j < k) whose statistic exceeded the upper-delta
        quantile; treated as uncorrelated.
    """

    rho: np.ndarray
    F_hat: np.ndarray = None
    delta: float = None
    delta_set: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        j = self.rho.shape[0]
        if self.rho.shape != (j, j):
            raise ValueError(f"rho must be square, got {self.rho.shape}")
        if not np.allclose(self.rho, self.rho.T, atol=1e-10):
            raise ValueError("rho must be symmetric")
        if not np.allclose(np.diag(self.rho), 1.0, atol=1e-10):
            raise ValueError("rho must have unit diagonal")
        if np.abs(self.rho).max() > 1.0 + 1e-10:
            raise ValueError("rho entries must lie in [-1, 1]")

    @property
    def n_replicates(self) -> int:
        return self.rho.shape[0]

    @classmethod
    def identity(cls, n_replicates: int) -> "ReplicateCorrelation":
        """All off-diagonal correlations fixed to zero (the rho-ignoring mode)."""
        return cls(rho=np.eye(n_replicates))


def compute_dissociation(ds: FunctionalDataset) -> np.ndarray:
    """J x J matrix of dissociation statistics; diagonal is zero.

    For j != k the statistic averages, over subjects and over ordered time
    pairs (p, q != p), the product of the variate-summed difference curve
    at p and at q.
    """
    if ds.n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    if ds.n_points < 2:
        raise ValueError("need at least 2 time points")
    n, j, p = ds.n_subjects, ds.n_replicates, ds.n_points
    summed = ds.values.sum(axis=2)  # (N, J, P): 1' Y summed over variates
    out = np.zeros((j, j))
    for a in range(j):
        for b in range(a + 1, j):
            diff = summed[:, a, :] - summed[:, b, :]
            total = diff.sum(axis=1)
            square = (diff**2).sum(axis=1)
            stat = float((total**2 - square).sum()) / (n * p * (p - 1))
            out[a, b] = out[b, a] = stat
    return out


def _pair_list(n_replicates: int):
    return [(a, b) for a in range(n_replicates) for b in range(a + 1, n_replicates)]


def upper_quantile_threshold(values: np.ndarray, delta: float) -> float:
    """Nearest-rank (1 - delta) quantile of the off-diagonal statistics."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    ordered = np.sort(np.asarray(values, dtype=float))
    rank = math.ceil((1.0 - delta) * ordered.size)
    rank = min(max(rank, 1), ordered.size)
    return float(ordered[rank - 1])


def estimate_rho(ds: FunctionalDataset, delta: float = 0.3) -> ReplicateCorrelation:
    """Estimate the replicate correlation matrix by dissociation thresholding.

    Pairs whose statistic exceeds the upper-``delta`` quantile form the
    calibration set and are taken to be uncorrelated; every other pair's
    correlation is one minus the ratio of its statistic to the calibration
    mean, clamped to [-1, 1].

    Raises
    ------
    EmptyDeltaSet
        If no pair exceeds the threshold (delta too small).
    DegenerateDenominator
        If the calibration mean is non-positive.
    """
    f_hat = compute_dissociation(ds)
    pairs = _pair_list(ds.n_replicates)
    stats = np.array([f_hat[a, b] for a, b in pairs])
    threshold = upper_quantile_threshold(stats, delta)
    delta_set = tuple(pair for pair, stat in zip(pairs, stats) if stat > threshold)
    if not delta_set:
        raise EmptyDeltaSet(
            f"no pair exceeds the upper-{delta:g} quantile; increase delta"
        )
    pooled = float(np.mean([f_hat[a, b] for a, b in delta_set]))
    if pooled <= 0:
        raise DegenerateDenominator(f"pooled dissociation is {pooled:g}")
    rho = 1.0 - f_hat / pooled
    np.fill_diagonal(rho, 1.0)
    rho = np.clip(rho, -1.0, 1.0)
    for a, b in delta_set:
        rho[a, b] = rho[b, a] = 0.0
    return ReplicateCorrelation(rho=rho, F_hat=f_hat, delta=delta, delta_set=delta_set)


def dissociation_profile(f_hat: np.ndarray):
    """All (j, k) pairs with their statistics, sorted descending.

    Ties are broken by lexicographic (j, k) order so the output is
    deterministic.  Intended to guide the choice of delta: pick it below
    the visible change point of the sorted statistics.
    """
    f_hat = np.asarray(f_hat, dtype=float)
    pairs = _pair_list(f_hat.shape[0])
    entries = [((a, b), float(f_hat[a, b])) for a, b in pairs]
    entries.sort(key=lambda item: (-item[1], item[0]))
    return entries
