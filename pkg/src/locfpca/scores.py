"""Score prediction and eigenvalue estimation for fitted components.

Scores are predicted per subject by the best linear unbiased predictor
under the working model: the stacked J*MP observation vector equals a
loading operator applied to the subject- and replicate-level scores plus
white noise.  The loading operator replicates the subject-level vectors
across replicates and places the replicate-level vectors per replicate;
the score prior is diagonal per level except for the replicate
correlation, which couples same-rank scores across replicates.

All quantities here live on the matrix scale: loadings are unit vectors
and score variances are matrix quadratic forms.  Callers that report on
the function scale divide eigenvalues by P and scores by sqrt(P).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .dataset import FunctionalDataset
from .errors import SingularSystem

__all__ = [
    "ScoreSet",
    "blup_scores",
    "empirical_eigenvalues",
    "plugin_eigenvalues",
]


@dataclass
class ScoreSet:
    """Predicted scores with (optionally) their empirical-moment variances.

    ``xi_z`` is (N, R1); ``xi_w`` is (N, J, R2).  ``theta_z`` and
    ``theta_w`` are filled by :func:`empirical_eigenvalues`.
    """

    xi_z: np.ndarray
    xi_w: np.ndarray
    theta_z: np.ndarray = None
    theta_w: np.ndarray = None


def plugin_eigenvalues(kmat: np.ndarray, components) -> np.ndarray:
    """Quadratic-form variances max(0, phi' K phi), one per component."""
    kmat = np.asarray(kmat, dtype=float)
    out = np.empty(len(components))
    for idx, comp in enumerate(components):
        out[idx] = max(0.0, float(comp.phi @ kmat @ comp.phi))
    return out


def _psd_correlation(rho: np.ndarray) -> np.ndarray:
    """Clip tiny negative eigenvalues so the score prior is invertible."""
    eigval, eigvec = np.linalg.eigh(rho)
    if eigval[0] >= 1e-10:
        return rho
    clipped = np.maximum(eigval, 1e-8)
    fixed = (eigvec * clipped) @ eigvec.T
    return 0.5 * (fixed + fixed.T)


def blup_scores(
    ds: FunctionalDataset,
    comps_z,
    comps_w,
    rho,
    sigma2: float,
) -> ScoreSet:
    """Best linear unbiased prediction of all scores, one solve per subject.

    The (R1 + J*R2)-dimensional system
    ``(sigma2 * G^-1 + Z'Z) xi = Z' y_i`` is solved with a single shared
    Cholesky factorization; this equals the direct
    ``G Z'(Z G Z' + sigma2 I)^-1 y_i`` without ever forming the J*MP
    matrix.  Components with zero prior variance receive zero scores.

    Raises
    ------
    SingularSystem
        If ``sigma2`` is zero and the normal matrix is rank-deficient.
    """
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be nonnegative, got {sigma2}")
    if not comps_z or not comps_w:
        raise ValueError("need at least one component per level")
    n, j = ds.n_subjects, ds.n_replicates
    mp = ds.n_variates * ds.n_points
    r1, r2 = len(comps_z), len(comps_w)

    phi_z = np.column_stack([c.phi for c in comps_z])  # (MP, R1)
    phi_w = np.column_stack([c.phi for c in comps_w])  # (MP, R2)
    theta_z = np.array([0.0 if c.theta is None else float(c.theta) for c in comps_z])
    theta_w = np.array([0.0 if c.theta is None else float(c.theta) for c in comps_w])

    loads = np.hstack(
        [np.kron(np.ones((j, 1)), phi_z), np.kron(np.eye(j), phi_w)]
    )  # (J*MP, R1 + J*R2)
    corr = _psd_correlation(np.asarray(rho.rho, dtype=float))
    prior = np.zeros((r1 + j * r2, r1 + j * r2))
    prior[:r1, :r1] = np.diag(theta_z)
    prior[r1:, r1:] = np.kron(corr, np.diag(theta_w))

    active = np.concatenate([theta_z > 0, np.tile(theta_w > 0, j)])
    if not active.any():
        return ScoreSet(xi_z=np.zeros((n, r1)), xi_w=np.zeros((n, j, r2)))
    z_act = loads[:, active]
    prior_act = prior[np.ix_(active, active)]

    normal = z_act.T @ z_act
    if sigma2 > 0:
        normal = normal + sigma2 * np.linalg.inv(prior_act)
    try:
        chol = sla.cho_factor(normal)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc

    y_stack = ds.values.reshape(n, j * mp).T  # (J*MP, N), replicate-major rows
    solved = sla.cho_solve(chol, z_act.T @ y_stack)  # (n_active, N)
    full = np.zeros((r1 + j * r2, n))
    full[active] = solved
    xi_z = full[:r1].T.copy()
    xi_w = np.transpose(full[r1:].reshape(j, r2, n), (2, 0, 1)).copy()
    return ScoreSet(xi_z=xi_z, xi_w=xi_w)


def empirical_eigenvalues(scores: ScoreSet) -> ScoreSet:
    """Sample variances of the predicted scores, stored into the score set.

    Subject-level variances are over subjects; replicate-level variances
    pool all (subject, replicate) scores.  Unbiased (n-1) denominators.
    """
    n = scores.xi_z.shape[0]
    if n < 2:
        raise ValueError("need at least two subjects for empirical variances")
    scores.theta_z = scores.xi_z.var(axis=0, ddof=1)
    pooled = scores.xi_w.reshape(-1, scores.xi_w.shape[2])
    scores.theta_w = pooled.var(axis=0, ddof=1)
    return scores
