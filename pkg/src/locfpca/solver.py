"""Consensus solver for penalized rank-one covariance decomposition.

Each component solves, over the deflated Fantope (trace-one matrices with
eigenvalues in [0, 1] that are orthogonal to previously found components),

    maximize  <K - gamma*D, H>  -  alpha * sum_{m,l} P ||H^(m,l)||_F
                                -  lambda * ||H||_1,

by alternating a Euclidean projection onto the deflated Fantope (the H
update), a blockwise shrinkage (the A update) and a scaled dual step (the
C update).  The projection reduces to water-filling the spectrum of the
complement-restricted input: shift all eigenvalues down by a common
threshold, clip to [0, 1], and pick the threshold so the clipped values
sum to one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InfeasibleDeflation, NotConvergedWarning
from .penalties import block_group_shrink, penalty_matrix

__all__ = [
    "AdmmState",
    "Component",
    "admm_solve",
    "extract_components",
    "project_deflated_fantope",
    "waterfill_threshold",
]

SUPPORT_TOL = 1e-8
_DISCARD_TOL = 1e-8  # overlap with the deflation range that disqualifies an eigenvector


@dataclass
class AdmmState:
    """Converged (or truncated) consensus triple with diagnostics.

    ``H`` lies in the deflated Fantope at every iteration; ``A`` carries the
    exact zeros produced by shrinkage; ``C`` is the scaled dual variable.
    Residuals are the squared Frobenius quantities used by the stopping
    rule: ``residual_primal = ||H - A||^2`` and
    ``residual_dual = tau^2 ||A - A_prev||^2``.
    """

    H: np.ndarray
    A: np.ndarray
    C: np.ndarray
    iterations: int
    residual_primal: float
    residual_dual: float
    converged: bool
    tau: float


@dataclass
class Component:
    """One estimated eigenvector with its penalty context.

    ``phi`` has unit Euclidean norm and exact zeros off its support; it is
    rescaled only for reporting.  ``theta`` is the variance explained along
    ``phi`` in matrix quadratic-form units (filled by the scoring module),
    ``fve`` the fraction of variance explained.
    """

    phi: np.ndarray
    level: str
    penalties: tuple
    support: np.ndarray = None
    theta: float = None
    fve: float = None
    converged: bool = True
    iterations: int = 0
    residual_primal: float = 0.0
    residual_dual: float = 0.0

    def __post_init__(self):
        if self.support is None:
            self.support = self.phi != 0.0


def waterfill_threshold(eigenvalues: np.ndarray) -> float:
    """Threshold t such that sum(clip(eigenvalues - t, 0, 1)) == 1.

    The clipped-sum function is piecewise linear and non-increasing in t
    with breakpoints at every eigenvalue and every eigenvalue minus one, so
    a monotone scan over sorted breakpoints brackets the root and linear
    interpolation inside the bracket solves it exactly.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        raise ValueError("no eigenvalues to water-fill")
    breakpoints = np.unique(np.concatenate([lam, lam - 1.0]))
    filled = np.clip(lam[None, :] - breakpoints[:, None], 0.0, 1.0).sum(axis=1)
    # filled is non-increasing along breakpoints; find the bracketing segment
    above = np.nonzero(filled >= 1.0)[0]
    if above.size == 0:  # cannot happen: filled at the smallest breakpoint is >= 1
        return _waterfill_bisect(lam, breakpoints)
    lo = above[-1]
    if filled[lo] == 1.0 or lo + 1 >= breakpoints.size:
        return float(breakpoints[lo])
    g_lo, g_hi = filled[lo], filled[lo + 1]
    if g_lo == g_hi:  # flat segment at 1: any point yields identical weights
        return float(breakpoints[lo])
    frac = (g_lo - 1.0) / (g_lo - g_hi)
    return float(breakpoints[lo] + frac * (breakpoints[lo + 1] - breakpoints[lo]))


def _waterfill_bisect(lam: np.ndarray, breakpoints: np.ndarray) -> float:
    lo, hi = float(breakpoints[0]) - 1.0, float(breakpoints[-1])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(lam - mid, 0.0, 1.0).sum() >= 1.0:
            lo = mid
        else:
            hi = mid
    return lo


class _Deflation:
    """Orthonormal basis of the directions removed by previous components."""

    def __init__(self, basis: np.ndarray = None):
        self.basis = basis  # (n, r) or None

    @property
    def rank(self) -> int:
        return 0 if self.basis is None else self.basis.shape[1]

    def add(self, vector: np.ndarray) -> None:
        vec = vector.astype(float, copy=True)
        if self.basis is not None:
            vec -= self.basis @ (self.basis.T @ vec)
        nrm = np.linalg.norm(vec)
        if nrm <= 1e-12:
            raise InfeasibleDeflation("new component lies in the deflated span")
        vec /= nrm
        self.basis = vec[:, None] if self.basis is None else np.column_stack([self.basis, vec])

    def complement_restrict(self, mat: np.ndarray) -> np.ndarray:
        if self.basis is None:
            return mat
        t = self.basis.T @ mat
        core = t @ self.basis
        out = mat - self.basis @ t - (self.basis @ t).T + self.basis @ core @ self.basis.T
        return 0.5 * (out + out.T)

    @classmethod
    def from_projection(cls, pi: np.ndarray) -> "_Deflation":
        pi = np.asarray(pi, dtype=float)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise ValueError(f"projection must be square, got {pi.shape}")
        if np.abs(pi).max() == 0.0:
            return cls(None)
        if np.abs(pi - pi.T).max() > 1e-8 or np.abs(pi @ pi - pi).max() > 1e-6:
            raise ValueError("projection must be symmetric and idempotent")
        eigval, eigvec = np.linalg.eigh(pi)
        cols = eigvec[:, eigval > 0.5]
        return cls(cols if cols.size else None)


def _project(bmat: np.ndarray, deflation: _Deflation, k_hint: int):
    """Euclidean projection onto the deflated Fantope.

    Returns (H, n_active) where n_active is the number of eigen-directions
    that received positive weight.  Eigenpairs overlapping the deflation
    range are discarded before water-filling.  A subset eigendecomposition
    of adaptively growing size is used: the result is certified exact once
    the threshold is at least the smallest fetched eigenvalue, because all
    unfetched eigenvalues then receive zero weight.
    """
    n = bmat.shape[0]
    rank = deflation.rank
    if n - rank < 1:
        raise InfeasibleDeflation(f"deflation rank {rank} leaves no direction in dim {n}")
    btil = deflation.complement_restrict(bmat)
    k = min(n, max(k_hint, rank + 2))
    while True:
        if k > n // 2:  # subset mode stops paying off; full dsyevd is robust
            k = n
        if k >= n:
            eigval, eigvec = np.linalg.eigh(btil)
        else:
            try:
                eigval, eigvec = sla.eigh(btil, subset_by_index=[n - k, n - 1])
            except np.linalg.LinAlgError:
                # dsyevr can fail on tightly clustered spectra; dsyevd cannot
                k = n
                eigval, eigvec = np.linalg.eigh(btil)
        if deflation.basis is not None:
            overlap = np.linalg.norm(deflation.basis.T @ eigvec, axis=0)
            keep = overlap <= _DISCARD_TOL
        else:
            keep = np.ones(eigval.size, dtype=bool)
        kept_vals = eigval[keep]
        if kept_vals.size == 0:
            if k >= n:
                raise InfeasibleDeflation("no eigen-direction survives the deflation")
            k = min(n, 2 * k)
            continue
        threshold = waterfill_threshold(kept_vals)
        if k < n and threshold < eigval[0]:
            k = min(n, 2 * k)
            continue
        weights = np.clip(kept_vals - threshold, 0.0, 1.0)
        active = weights > 0.0
        vecs = eigvec[:, keep][:, active]
        h = (vecs * weights[active]) @ vecs.T
        return 0.5 * (h + h.T), int(active.sum())


def project_deflated_fantope(bmat: np.ndarray, pi: np.ndarray = None) -> np.ndarray:
    """Project a symmetric matrix onto the Fantope deflated around ``pi``.

    ``pi`` is a symmetric idempotent matrix (the sum of outer products of
    previously found components) or None for the plain Fantope.

    Raises
    ------
    InfeasibleDeflation
        If the deflation rank leaves no admissible direction.
    """
    bmat = np.asarray(bmat, dtype=float)
    if np.abs(bmat - bmat.T).max() > 1e-8:
        raise ValueError("input must be symmetric")
    deflation = _Deflation(None) if pi is None else _Deflation.from_projection(pi)
    h, _ = _project(0.5 * (bmat + bmat.T), deflation, k_hint=bmat.shape[0])
    return h


def default_tau(kmat: np.ndarray) -> float:
    """Step scale max(1, largest eigenvalue of K)."""
    n = kmat.shape[0]
    top = sla.eigh(kmat, subset_by_index=[n - 1, n - 1], eigvals_only=True)[0]
    return float(max(1.0, top))


def _admm(
    kmat: np.ndarray,
    gamma: float,
    alpha: float,
    lam: float,
    deflation: _Deflation,
    *,
    n_variates: int,
    tau: float = None,
    omega: float = 1e-5,
    max_iter: int = 2000,
    callback=None,
    init: AdmmState = None,
) -> AdmmState:
    n = kmat.shape[0]
    if n % n_variates:
        raise ValueError(f"matrix dim {n} is not a multiple of n_variates={n_variates}")
    n_points = n // n_variates
    if tau is None:
        tau = default_tau(kmat)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    target = kmat if gamma == 0 else kmat - gamma * penalty_matrix(n_points, n_variates)
    step = (target + target.T) / (2.0 * tau)

    if init is not None:
        a = init.A.copy()
        c = init.C.copy()
    else:
        a = np.zeros_like(step)
        c = np.zeros_like(step)
    alpha_step = alpha / tau
    lambda_step = lam / tau
    k_hint = deflation.rank + 8
    h = a
    r_primal = r_dual = np.inf
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        h, n_active = _project(a - c + step, deflation, k_hint)
        k_hint = n_active + 4
        a_new = block_group_shrink(h + c, alpha_step, lambda_step, n_points, n_variates)
        c = c + h - a_new
        r_primal = float(((h - a_new) ** 2).sum())
        r_dual = float(tau * tau * ((a_new - a) ** 2).sum())
        a = a_new
        if callback is not None:
            callback(iteration, h, a, c)
        if max(r_primal, r_dual) <= omega:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"solver stopped at max_iter={max_iter} with residuals "
            f"({r_primal:.3e}, {r_dual:.3e}) > omega={omega:.1e}",
            NotConvergedWarning,
        )
    return AdmmState(
        H=h,
        A=a,
        C=c,
        iterations=iteration,
        residual_primal=r_primal,
        residual_dual=r_dual,
        converged=converged,
        tau=tau,
    )


def admm_solve(
    kmat: np.ndarray,
    gamma: float = 0.0,
    alpha: float = 0.0,
    lam: float = 0.0,
    *,
    n_variates: int = 1,
    Pi: np.ndarray = None,
    tau: float = None,
    omega: float = 1e-5,
    max_iter: int = 2000,
    callback=None,
) -> AdmmState:
    """Run the consensus loop for one component.

    Starting from A = C = 0, alternate the deflated-Fantope projection of
    ``A - C + (K - gamma D)/tau``, the blockwise shrinkage of ``H + C``
    with steps alpha/tau and lambda/tau, and the dual update
    ``C += H - A`` until ``max(||H-A||_F^2, tau^2 ||dA||_F^2) <= omega``
    or ``max_iter`` is reached (in which case the state is returned with
    ``converged=False`` and a NotConvergedWarning is emitted).

    ``callback(iteration, H, A, C)`` is invoked after every iteration.
    """
    kmat = np.asarray(kmat, dtype=float)
    deflation = _Deflation(None) if Pi is None else _Deflation.from_projection(Pi)
    return _admm(
        kmat,
        gamma,
        alpha,
        lam,
        deflation,
        n_variates=n_variates,
        tau=tau,
        omega=omega,
        max_iter=max_iter,
        callback=callback,
    )


def leading_sparse_eigenvector(a: np.ndarray) -> np.ndarray:
    """Unit leading eigenvector of A, keeping A's exact zero pattern.

    The eigenproblem is solved on the submatrix of active rows so entries
    outside A's support are exact zeros.  Entries below 1e-8 in magnitude
    are snapped to zero and the sign is fixed so the largest-magnitude
    entry is positive.
    """
    n = a.shape[0]
    active = np.flatnonzero(np.abs(a).max(axis=0) > 0.0)
    if active.size == 0:
        raise ValueError("shrinkage removed every coordinate; weaken the penalties")
    sub = a[np.ix_(active, active)]
    _, vecs = np.linalg.eigh(sub)
    phi = np.zeros(n)
    phi[active] = vecs[:, -1]
    phi[np.abs(phi) <= SUPPORT_TOL] = 0.0
    nrm = np.linalg.norm(phi)
    if nrm == 0.0:
        raise ValueError("leading eigenvector collapsed to zero")
    phi /= nrm
    pivot = int(np.argmax(np.abs(phi)))
    if phi[pivot] < 0:
        phi = -phi
    return phi


def extract_components(
    kmat: np.ndarray,
    gamma: float,
    penalty_schedule,
    n_components: int,
    *,
    n_variates: int = 1,
    level: str = "subject",
    tau: float = None,
    omega: float = 1e-5,
    max_iter: int = 2000,
) -> list:
    """Sequentially extract components with Fantope deflation.

    For each rank r the solver runs with the projection onto previously
    found components removed from the feasible set; the component vector
    is the leading eigenvector of the converged sparse iterate A and the
    deflation is updated with its outer product.

    ``penalty_schedule`` is a sequence of (alpha_r, lambda_r) pairs of
    length at least ``n_components``.
    """
    kmat = np.asarray(kmat, dtype=float)
    n = kmat.shape[0]
    if n_components > n:
        raise ValueError(f"cannot extract {n_components} components in dimension {n}")
    schedule = list(penalty_schedule)
    if len(schedule) < n_components:
        raise ValueError(
            f"penalty schedule has {len(schedule)} entries, need {n_components}"
        )
    if tau is None:
        tau = default_tau(kmat)
    deflation = _Deflation(None)
    components = []
    for rank in range(n_components):
        alpha_r, lam_r = schedule[rank]
        state = _admm(
            kmat,
            gamma,
            alpha_r,
            lam_r,
            deflation,
            n_variates=n_variates,
            tau=tau,
            omega=omega,
            max_iter=max_iter,
        )
        phi = leading_sparse_eigenvector(state.A)
        components.append(
            Component(
                phi=phi,
                level=level,
                penalties=(gamma, alpha_r, lam_r),
                converged=state.converged,
                iterations=state.iterations,
                residual_primal=state.residual_primal,
                residual_dual=state.residual_dual,
            )
        )
        deflation.add(phi)
    return components
