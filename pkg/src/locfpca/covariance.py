"""Method-of-moments estimation of the two-level covariance operators.

Pairwise squared differences of the stacked observation vectors identify
the between-subject operator (differences across subjects) and the
within-subject operator (differences across replicates of one subject).
The replicate correlation enters through a scalar correction ``c`` so the
within-subject operator is not attenuated by correlated replicates.
Everything is accumulated through Gram products of the MP x NJ data matrix,
which is algebraically identical to the explicit double loops but runs in
O(NJ (MP)^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import ReplicateCorrelation
from .dataset import FunctionalDataset
from .errors import NeedsTwoReplicates, NeedsTwoSubjects

__all__ = [
    "CovariancePair",
    "compute_c",
    "estimate_covariances",
    "estimate_noise_variance",
]


@dataclass
class CovariancePair:
    """Raw moment matrices and the derived covariance operators.

    ``F_z`` averages (Y_ij - Y_nk)(Y_ij - Y_nk)' over subject pairs i != n,
    ``F_w`` averages (Y_ij - Y_ik)(Y_ij - Y_ik)' over replicate pairs
    j != k.  The derived operators satisfy, exactly,

        K_z = F_z / 2 - F_w / (2c),    K_w = F_w / (2c).

    ``sigma2`` is filled by :func:`estimate_noise_variance`.
    """

    K_z: np.ndarray
    K_w: np.ndarray
    F_z: np.ndarray
    F_w: np.ndarray
    c: float
    n_variates: int
    n_points: int
    sigma2: float = None

    def level(self, which: str) -> np.ndarray:
        if which == "subject":
            return self.K_z
        if which == "replicate":
            return self.K_w
        raise ValueError(f"level must be 'subject' or 'replicate', got {which!r}")


def compute_c(rho: ReplicateCorrelation) -> float:
    """Correction factor (J - sum(rho)/J) / (J - 1); equals 1 for zero correlation."""
    j = rho.n_replicates
    if j < 2:
        raise NeedsTwoReplicates(f"need J >= 2, got {j}")
    return float((j - rho.rho.sum() / j) / (j - 1))


def estimate_covariances(
    ds: FunctionalDataset, rho: ReplicateCorrelation
) -> CovariancePair:
    """Moment-based estimates of the between- and within-subject covariances.

    Requires demeaned data, N >= 2 subjects and J >= 2 replicates.  The
    Gram accumulation below reproduces the pairwise-difference double
    loops exactly (the loop form is kept as the oracle in the tests):

        sum_{i != n, j, k} (Y_ij - Y_nk)(.)' =
            2 (N-1) J G_all - 2 (s s' - G_subj)
        sum_{i, j != k} (Y_ij - Y_ik)(.)'    = 2 J G_all - 2 G_subj

    with G_all the Gram matrix of all columns, S the per-subject column
    sums, G_subj = S S' and s the grand column sum.
    """
    n, j = ds.n_subjects, ds.n_replicates
    if n < 2:
        raise NeedsTwoSubjects(f"need N >= 2 subjects, got {n}")
    if j < 2:
        raise NeedsTwoReplicates(f"need J >= 2 replicates, got {j}")
    if not ds.demeaned:
        raise ValueError("estimate_covariances requires demeaned data")
    if rho.n_replicates != j:
        raise ValueError(
            f"rho is for {rho.n_replicates} replicates, dataset has {j}"
        )

    mp = ds.n_variates * ds.n_points
    y = ds.stacked()  # (MP, N*J)
    g_all = y @ y.T
    subj_sums = y.reshape(mp, n, j).sum(axis=2)  # (MP, N)
    g_subj = subj_sums @ subj_sums.T
    grand = subj_sums.sum(axis=1)

    f_w = (2.0 * j * g_all - 2.0 * g_subj) / (n * j * (j - 1))
    f_z = (
        2.0 * (n - 1) * j * g_all - 2.0 * (np.outer(grand, grand) - g_subj)
    ) / (n * (n - 1) * j * j)
    f_w = 0.5 * (f_w + f_w.T)
    f_z = 0.5 * (f_z + f_z.T)

    c = compute_c(rho)
    k_w = f_w / (2.0 * c)
    k_z = 0.5 * f_z - k_w
    return CovariancePair(
        K_z=k_z,
        K_w=k_w,
        F_z=f_z,
        F_w=f_w,
        c=c,
        n_variates=ds.n_variates,
        n_points=ds.n_points,
    )


def estimate_noise_variance(pair: CovariancePair) -> float:
    """Nugget variance from the excess of the within-subject diagonal.

    The diagonal of F_w / 2 carries c * K_w(t, t) plus the noise variance;
    K_w(t, t) itself is recovered by averaging the two adjacent
    off-diagonal entries within the same variate block (one-sided at the
    grid ends).  The estimate is the mean positive excess and is stored
    into ``pair.sigma2``.
    """
    p, m = pair.n_points, pair.n_variates
    if p < 3:
        raise ValueError(f"need at least 3 time points, got {p}")
    half_fw = 0.5 * pair.F_w
    k_w = pair.K_w
    excess = np.empty(m * p)
    for mm in range(m):
        base = mm * p
        for pp in range(p):
            idx = base + pp
            if pp == 0:
                interp = k_w[idx, idx + 1]
            elif pp == p - 1:
                interp = k_w[idx - 1, idx]
            else:
                interp = 0.5 * (k_w[idx - 1, idx] + k_w[idx, idx + 1])
            excess[idx] = max(0.0, half_fw[idx, idx] - pair.c * interp)
    sigma2 = float(excess.mean())
    pair.sigma2 = sigma2
    return sigma2
