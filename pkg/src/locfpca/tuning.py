"""Penalty selection by cross-validation or variance retention.

The smoothing weight gamma is shared by all components and chosen by
5-fold cross-validation: folds are split by subject, and the candidate
maximizing the summed inner product between the rank-one fit on the
training covariance and the held-out covariance wins.  The sparsity pair
(alpha_r, lambda_r) is then chosen per rank, either by the same
cross-validated inner product explored with coordinate descent over a
grid, or by taking the most aggressive pair whose relative fraction of
variance explained stays above a floor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .covariance import estimate_covariances
from .dataset import FunctionalDataset
from .errors import FoldTooSmall, NoFeasiblePairWarning, NotConvergedWarning
from .penalties import penalty_matrix
from .solver import _admm, _Deflation, default_tau, leading_sparse_eigenvector

__all__ = [
    "TuningConfig",
    "TuningResult",
    "PenaltySearchCV",
    "select_gamma_cv",
    "select_alpha_lambda_cv",
    "select_alpha_lambda_rfve",
    "subject_folds",
    "total_variation",
    "tune_penalties",
]


@dataclass
class TuningConfig:
    """Grid and mode settings for penalty selection.

    ``gamma_grid`` and ``alpha_lambda_grid`` may be left None to use the
    automatic grids: gamma spans {0} plus log-spaced points up to P times
    the largest eigenvalue of K; each sparsity axis spans linearly from 0
    to the 95% quantile of the off-diagonal magnitudes of the deflated
    covariance.  ``alpha_lambda_grid`` is a pair (alphas, lambdas); either
    side may be None for automatic, or a single-value sequence such as
    ``[0.0]`` to pin that axis.
    """

    n_folds: int = 5
    gamma_grid: tuple = None
    alpha_lambda_grid: tuple = None
    rfve_floor: float = 0.7
    mode: str = "cv"
    gamma_grid_size: int = 10
    penalty_grid_size: int = 8
    # inner CV solves may run looser/shorter than the final fits: the held-out
    # inner product is insensitive once the primal residual is small
    cv_omega: float = None  # None = use the solver omega
    cv_max_iter: int = None  # None = use the solver max_iter

    def __post_init__(self):
        if self.mode not in ("cv", "rfve"):
            raise ValueError(f"mode must be 'cv' or 'rfve', got {self.mode!r}")
        if not 0.0 < self.rfve_floor <= 1.0:
            raise ValueError(f"rfve_floor must be in (0, 1], got {self.rfve_floor}")
        if self.n_folds < 2:
            raise ValueError(f"n_folds must be >= 2, got {self.n_folds}")
        if self.gamma_grid is not None and len(self.gamma_grid) == 0:
            raise ValueError("gamma_grid must be nonempty")


@dataclass
class TuningResult:
    """Selected penalties plus the per-candidate diagnostics."""

    gamma: float
    pairs: list
    gamma_grid: np.ndarray = None
    gamma_objectives: np.ndarray = None
    rank_details: list = field(default_factory=list)


def subject_folds(n_subjects: int, n_folds: int, seed: int) -> list:
    """Deterministic subject partition; a function of (seed, N, n_folds) only."""
    if n_subjects < n_folds:
        raise FoldTooSmall(f"cannot split {n_subjects} subjects into {n_folds} folds")
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(n_subjects), n_folds)
    folds = [np.sort(p) for p in parts]
    for part in folds:
        if part.size < 2 or n_subjects - part.size < 2:
            raise FoldTooSmall(
                f"fold of size {part.size} from {n_subjects} subjects leaves "
                "fewer than 2 subjects on one side"
            )
    return folds


class FoldCovariances:
    """Training/validation covariance pairs for every fold (both levels)."""

    def __init__(self, ds: FunctionalDataset, rho, n_folds: int, seed: int):
        self.folds = subject_folds(ds.n_subjects, n_folds, seed)
        all_idx = np.arange(ds.n_subjects)
        self.train = []
        self.val = []
        for part in self.folds:
            train_idx = np.setdiff1d(all_idx, part)
            self.train.append(estimate_covariances(ds.subset_subjects(train_idx), rho))
            self.val.append(estimate_covariances(ds.subset_subjects(part), rho))

    def level(self, which: str):
        return (
            [pair.level(which) for pair in self.train],
            [pair.level(which) for pair in self.val],
        )


def default_gamma_grid(kmat: np.ndarray, n_points: int, size: int = 10) -> np.ndarray:
    """{0} plus log-spaced candidates up to P times the top eigenvalue of K."""
    top = float(np.linalg.eigvalsh(kmat)[-1])
    scale = n_points * top
    if scale <= 0:
        return np.array([0.0])
    return np.concatenate([[0.0], np.geomspace(1e-3 * scale, scale, num=size)])


def total_variation(kmat: np.ndarray, gamma: float, n_variates: int) -> float:
    """Sum of the positive eigenvalues of K - gamma D (noise-free total variation)."""
    n_points = kmat.shape[0] // n_variates
    target = kmat if gamma == 0 else kmat - gamma * penalty_matrix(n_points, n_variates)
    eigs = np.linalg.eigvalsh(target)
    return float(eigs[eigs > 0].sum())


def _penalty_axis_grid(explicit, bound: float, size: int) -> np.ndarray:
    if explicit is not None:
        return np.asarray(explicit, dtype=float)
    if bound <= 0:
        return np.array([0.0])
    return np.linspace(0.0, bound, num=size)


def _offdiag_quantile_bound(kmat: np.ndarray) -> float:
    mask = ~np.eye(kmat.shape[0], dtype=bool)
    return float(np.quantile(np.abs(kmat[mask]), 0.95))


class PenaltySearchCV:
    """Rank-by-rank cross-validated selection of (alpha_r, lambda_r).

    The search holds per-fold deflations built from the training-fold fits
    of the already-selected lower ranks, plus the full-data deflation used
    to bound the candidate grids.  Consecutive solves within a fold are
    warm-started from one another, which changes nothing at convergence
    but cuts the iteration count substantially.
    """

    def __init__(
        self,
        ds: FunctionalDataset,
        rho,
        level: str,
        gamma: float,
        config: TuningConfig,
        seed: int = 0,
        *,
        fold_covariances: FoldCovariances = None,
        k_full: np.ndarray = None,
        omega: float = 1e-5,
        max_iter: int = 2000,
    ):
        self.n_variates = ds.n_variates
        self.level = level
        self.gamma = gamma
        self.config = config
        self.omega = omega
        self.cv_omega = config.cv_omega if config.cv_omega is not None else omega
        self.max_iter = max_iter
        self.cv_max_iter = (
            config.cv_max_iter if config.cv_max_iter is not None else max_iter
        )
        if fold_covariances is None:
            fold_covariances = FoldCovariances(ds, rho, config.n_folds, seed)
        self.k_train, self.k_val = fold_covariances.level(level)
        if k_full is None:
            k_full = estimate_covariances(ds, rho).level(level)
        self.k_full = k_full
        self.tau = default_tau(k_full)
        self.fold_deflations = [_Deflation(None) for _ in self.k_train]
        self.full_deflation = _Deflation(None)
        self.full_components = []
        self.full_states = []
        self.rank = 0
        self.rank_details = []

    def _solve_fold(self, nu: int, alpha: float, lam: float, init=None):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            return _admm(
                self.k_train[nu],
                self.gamma,
                alpha,
                lam,
                self.fold_deflations[nu],
                n_variates=self.n_variates,
                tau=self.tau,
                omega=self.cv_omega,
                max_iter=self.cv_max_iter,
                init=init,
            )

    def select_next(self):
        """Choose (alpha_r, lambda_r) for the next rank and advance the state."""
        k_deflated = self.full_deflation.complement_restrict(self.k_full)
        bound = _offdiag_quantile_bound(k_deflated)
        explicit_a, explicit_l = self.config.alpha_lambda_grid or (None, None)
        size = self.config.penalty_grid_size
        alphas = _penalty_axis_grid(explicit_a, bound, size)
        lambdas = _penalty_axis_grid(explicit_l, bound, size)

        cache = {}
        last_states = [None] * len(self.k_train)
        incumbent = {"pair": None, "total": -np.inf, "directions": None}

        def objective(alpha, lam):
            key = (float(alpha), float(lam))
            if key in cache:
                return cache[key]
            total = 0.0
            states = []
            for nu in range(len(self.k_train)):
                state = self._solve_fold(nu, alpha, lam, init=last_states[nu])
                last_states[nu] = state
                total += float((state.H * self.k_val[nu]).sum())
                states.append(state)
            cache[key] = total
            # keep only the incumbent's fold directions, not every state
            if total > incumbent["total"]:
                incumbent.update(
                    pair=key,
                    total=total,
                    directions=[_component_direction(s) for s in states],
                )
            return total

        current = (float(alphas[0]), float(lambdas[0]))
        if 0.0 in alphas and 0.0 in lambdas:
            current = (0.0, 0.0)
        objective(*current)
        path = [current]
        for _ in range(20):  # alternating sweeps; the finite grid forces termination
            moved = False
            best_a = max(alphas, key=lambda a: objective(a, current[1]))
            if (float(best_a), current[1]) != current and objective(
                best_a, current[1]
            ) > objective(*current):
                current = (float(best_a), current[1])
                path.append(current)
                moved = True
            best_l = max(lambdas, key=lambda l: objective(current[0], l))
            if (current[0], float(best_l)) != current and objective(
                current[0], best_l
            ) > objective(*current):
                current = (current[0], float(best_l))
                path.append(current)
                moved = True
            if not moved:
                break
        best_obj = cache[current]
        assert all(best_obj >= val for val in cache.values())

        # advance per-fold deflations with the winning fits
        if incumbent["pair"] != current:  # tie resolved elsewhere: refit folds
            directions = [
                _component_direction(self._solve_fold(nu, *current, init=last_states[nu]))
                for nu in range(len(self.k_train))
            ]
        else:
            directions = incumbent["directions"]
        for nu, direction in enumerate(directions):
            self.fold_deflations[nu].add(direction)
        # advance the full-data deflation with a cold-start fit at the winner
        full_state = _admm(
            self.k_full,
            self.gamma,
            current[0],
            current[1],
            self.full_deflation,
            n_variates=self.n_variates,
            tau=self.tau,
            omega=self.omega,
            max_iter=self.max_iter,
        )
        phi = _component_direction(full_state)
        self.full_components.append(phi)
        self.full_states.append(full_state)
        self.full_deflation.add(phi)
        self.rank += 1
        detail = {
            "rank": self.rank,
            "alpha_grid": alphas.tolist(),
            "lambda_grid": lambdas.tolist(),
            "path": path,
            "objectives": {str(k): v for k, v in cache.items()},
            "chosen": current,
        }
        self.rank_details.append(detail)
        return current


def _component_direction(state) -> np.ndarray:
    """Leading eigenvector of the sparse iterate, or of H if fully shrunk."""
    try:
        return leading_sparse_eigenvector(state.A)
    except ValueError:
        return leading_sparse_eigenvector(state.H)


def select_gamma_cv(
    ds: FunctionalDataset,
    rho,
    level: str,
    config: TuningConfig = None,
    seed: int = 0,
    *,
    fold_covariances: FoldCovariances = None,
    k_full: np.ndarray = None,
    omega: float = 1e-5,
    max_iter: int = 2000,
    return_details: bool = False,
):
    """Pick gamma maximizing the cross-validated inner product.

    For every candidate and fold, a rank-one fit with no sparsity penalty
    is computed on the training covariance and scored against the
    validation covariance; the candidate with the largest summed score is
    returned.  Ties resolve to the earliest grid entry.
    """
    config = config or TuningConfig()
    if fold_covariances is None:
        fold_covariances = FoldCovariances(ds, rho, config.n_folds, seed)
    k_train, k_val = fold_covariances.level(level)
    if k_full is None:
        k_full = estimate_covariances(ds, rho).level(level)
    grid = (
        np.asarray(config.gamma_grid, dtype=float)
        if config.gamma_grid is not None
        else default_gamma_grid(k_full, ds.n_points, config.gamma_grid_size)
    )
    tau = default_tau(k_full)
    cv_omega = config.cv_omega if config.cv_omega is not None else omega
    cv_max_iter = config.cv_max_iter if config.cv_max_iter is not None else max_iter
    deflation = _Deflation(None)
    objectives = np.zeros(grid.size)
    warm = [None] * len(k_train)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConvergedWarning)
        for g_idx, gamma in enumerate(grid):
            total = 0.0
            for nu in range(len(k_train)):
                state = _admm(
                    k_train[nu],
                    float(gamma),
                    0.0,
                    0.0,
                    deflation,
                    n_variates=ds.n_variates,
                    tau=tau,
                    omega=cv_omega,
                    max_iter=cv_max_iter,
                    init=warm[nu],
                )
                warm[nu] = state
                total += float((state.H * k_val[nu]).sum())
            objectives[g_idx] = total
    best = int(np.argmax(objectives))
    assert (objectives[best] >= objectives).all()
    if return_details:
        return float(grid[best]), {"grid": grid, "objectives": objectives}
    return float(grid[best])


def select_alpha_lambda_cv(
    ds: FunctionalDataset,
    rho,
    level: str,
    gamma: float,
    rank: int,
    schedule_prev=(),
    config: TuningConfig = None,
    seed: int = 0,
    **solver_options,
):
    """Cross-validated (alpha_r, lambda_r) for one rank.

    ``schedule_prev`` carries the already-selected pairs of the lower
    ranks, which are refit on every training fold to build the deflations.
    """
    config = config or TuningConfig()
    search = PenaltySearchCV(ds, rho, level, gamma, config, seed, **solver_options)
    if len(schedule_prev) < rank - 1:
        raise ValueError(
            f"rank {rank} needs {rank - 1} previously selected pairs, "
            f"got {len(schedule_prev)}"
        )
    for prev_rank in range(rank - 1):
        alpha_p, lam_p = schedule_prev[prev_rank]
        pinned = TuningConfig(
            n_folds=config.n_folds,
            alpha_lambda_grid=([float(alpha_p)], [float(lam_p)]),
            rfve_floor=config.rfve_floor,
            mode=config.mode,
            cv_omega=config.cv_omega,
        )
        search.config = pinned
        search.select_next()
    search.config = config
    return search.select_next()


def select_alpha_lambda_rfve(
    kmat: np.ndarray,
    gamma: float,
    rank: int,
    pi_prev: np.ndarray = None,
    config: TuningConfig = None,
    *,
    n_variates: int = 1,
    tau: float = None,
    omega: float = 1e-5,
    max_iter: int = 2000,
    return_details: bool = False,
):
    """Most aggressive (alpha_r, lambda_r) keeping rFVE above the floor.

    Candidates are scanned in decreasing alpha + lambda (ties favouring
    the larger alpha, which zeroes whole variates); the first candidate
    whose fraction of variance explained, relative to the unpenalized fit,
    stays at or above ``config.rfve_floor`` wins.  (0, 0) always has
    rFVE = 1, so it is the fallback; if it is the only feasible candidate
    a NoFeasiblePairWarning is emitted.
    """
    config = config or TuningConfig()
    kmat = np.asarray(kmat, dtype=float)
    deflation = (
        _Deflation(None) if pi_prev is None else _Deflation.from_projection(pi_prev)
    )
    if tau is None:
        tau = default_tau(kmat)
    totv = total_variation(kmat, gamma, n_variates)
    if totv <= 0:
        warnings.warn("non-positive total variation; returning (0, 0)", NoFeasiblePairWarning)
        return ((0.0, 0.0), {}) if return_details else (0.0, 0.0)

    def fit_fve(alpha, lam):
        state = _admm(
            kmat, gamma, alpha, lam, deflation,
            n_variates=n_variates, tau=tau, omega=omega, max_iter=max_iter,
        )
        try:
            phi = leading_sparse_eigenvector(state.A)
        except ValueError:
            return 0.0
        return float(phi @ kmat @ phi) / totv

    k_deflated = deflation.complement_restrict(kmat)
    bound = _offdiag_quantile_bound(k_deflated)
    explicit_a, explicit_l = config.alpha_lambda_grid or (None, None)
    alphas = _penalty_axis_grid(explicit_a, bound, config.penalty_grid_size)
    lambdas = _penalty_axis_grid(explicit_l, bound, config.penalty_grid_size)
    fve_base = fit_fve(0.0, 0.0)
    if fve_base <= 0:
        warnings.warn("unpenalized fit explains no variance", NoFeasiblePairWarning)
        return ((0.0, 0.0), {}) if return_details else (0.0, 0.0)
    candidates = sorted(
        ((float(a), float(l)) for a in alphas for l in lambdas),
        key=lambda pair: (-(pair[0] + pair[1]), -pair[0]),
    )
    rfve_path = []
    chosen = (0.0, 0.0)
    for alpha, lam in candidates:
        if (alpha, lam) == (0.0, 0.0):
            rfve = 1.0
        else:
            rfve = fit_fve(alpha, lam) / fve_base
        rfve_path.append(((alpha, lam), rfve))
        if rfve >= config.rfve_floor:
            chosen = (alpha, lam)
            break
    if chosen == (0.0, 0.0) and len(candidates) > 1:
        warnings.warn(
            "only the unpenalized pair meets the rFVE floor", NoFeasiblePairWarning
        )
    if return_details:
        return chosen, {"rfve_path": rfve_path, "fve_base": fve_base}
    return chosen


def tune_penalties(
    ds: FunctionalDataset,
    rho,
    level: str,
    n_components: int,
    config: TuningConfig = None,
    seed: int = 0,
    *,
    omega: float = 1e-5,
    max_iter: int = 2000,
) -> TuningResult:
    """Full selection: gamma by CV, then per-rank pairs by CV or rFVE."""
    config = config or TuningConfig()
    fold_covariances = FoldCovariances(ds, rho, config.n_folds, seed)
    k_full = estimate_covariances(ds, rho).level(level)
    gamma, gamma_details = select_gamma_cv(
        ds,
        rho,
        level,
        config,
        seed,
        fold_covariances=fold_covariances,
        k_full=k_full,
        omega=omega,
        max_iter=max_iter,
        return_details=True,
    )
    pairs = []
    rank_details = []
    if config.mode == "cv":
        search = PenaltySearchCV(
            ds,
            rho,
            level,
            gamma,
            config,
            seed,
            fold_covariances=fold_covariances,
            k_full=k_full,
            omega=omega,
            max_iter=max_iter,
        )
        for _ in range(n_components):
            pairs.append(search.select_next())
        rank_details = search.rank_details
    else:
        deflation = _Deflation(None)
        tau = default_tau(k_full)
        for rank in range(1, n_components + 1):
            pi = (
                None
                if deflation.basis is None
                else deflation.basis @ deflation.basis.T
            )
            pair, detail = select_alpha_lambda_rfve(
                k_full,
                gamma,
                rank,
                pi,
                config,
                n_variates=ds.n_variates,
                tau=tau,
                omega=omega,
                max_iter=max_iter,
                return_details=True,
            )
            pairs.append(pair)
            detail["rank"] = rank
            detail["chosen"] = pair
            rank_details.append(detail)
            state = _admm(
                k_full,
                gamma,
                pair[0],
                pair[1],
                deflation,
                n_variates=ds.n_variates,
                tau=tau,
                omega=omega,
                max_iter=max_iter,
            )
            deflation.add(_component_direction(state))
    return TuningResult(
        gamma=gamma,
        pairs=pairs,
        gamma_grid=gamma_details["grid"],
        gamma_objectives=gamma_details["objectives"],
        rank_details=rank_details,
    )
