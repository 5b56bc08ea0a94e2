"""Top-level estimator tying the pipeline together, sklearn style."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .correlation import ReplicateCorrelation, estimate_rho
from .covariance import estimate_covariances, estimate_noise_variance
from .dataset import (
    FunctionalDataset,
    default_time_grid,
    demean_by_replicate,
    replicate_means,
)
from .scores import blup_scores, empirical_eigenvalues, plugin_eigenvalues
from .solver import Component, _admm, _Deflation, default_tau, leading_sparse_eigenvector
from .tuning import (
    FoldCovariances,
    PenaltySearchCV,
    TuningConfig,
    select_alpha_lambda_rfve,
    select_gamma_cv,
    total_variation,
)

_LEVELS = ("subject", "replicate")


class LocalizedMultilevelFPCA(BaseEstimator):
    """Interpretable principal components for multilevel multivariate curves.

    Fits the two-level covariance decomposition to a balanced observation
    tensor and extracts, per level, components that are smooth in time,
    optionally zero on entire variates and optionally zero on parts of
    the time domain.  Scores are predicted per subject and per
    (subject, replicate).

    Parameters
    ----------
    delta : float, default=0.3
        Quantile level used to pick the uncorrelated replicate pairs that
        calibrate the correlation estimate.
    estimate_correlation : bool, default=True
        If False the replicate correlation is fixed to zero (identity
        matrix) instead of being estimated.
    gamma : 'auto' or float, default='auto'
        Smoothing weight; 'auto' selects by 5-fold cross-validation.
    alpha : 'auto' or float, default='auto'
        Variate-sparsity weight; 'auto' tunes per rank (see
        ``tuning_mode``), a number applies to every rank.
    lam : 'auto' or float, default='auto'
        Time-localization weight, same conventions as ``alpha``.
    tuning_mode : {'cv', 'rfve'}, default='cv'
        Per-rank (alpha, lambda) selection: cross-validated inner product,
        or the most aggressive pair keeping relative FVE above
        ``rfve_floor``.
    rfve_floor : float, default=0.7
        Floor for the rfve mode, in (0, 1].
    n_components : None, int or (int, int), default=None
        Number of components per level.  None selects the smallest count
        whose cumulative FVE reaches ``fve_threshold``, capped at
        ``max_components``.
    fve_threshold : float, default=0.75
    max_components : int, default=8
    n_folds : int, default=5
    tau : float or None, default=None
        Consensus step scale; None uses max(1, top eigenvalue of K).
    omega : float, default=1e-5
        Solver stopping tolerance on the squared residuals.
    max_iter : int, default=2000
    random_state : int, default=0
        Seed for the deterministic subject fold assignment.

    Attributes
    ----------
    rho_ : ndarray (J, J)
        Estimated replicate correlation.
    c_ : float
        Correlation correction factor entering the covariance split.
    sigma2_ : float
        Estimated observation noise variance.
    cov_z_, cov_w_ : ndarray (MP, MP)
        Between- and within-subject covariance estimates.
    components_z_, components_w_ : list of Component
        Fitted components (unit-norm vectors with exact zeros).
    eigenfunctions_z_, eigenfunctions_w_ : ndarray (R, MP)
        Components rescaled to the function norm sqrt(P).
    eigenvalues_z_, eigenvalues_w_ : ndarray
        Function-scale variances (quadratic form / P).
    eigenvalues_empirical_z_, eigenvalues_empirical_w_ : ndarray
        Function-scale sample variances of the predicted scores.
    fve_z_, fve_w_ : ndarray
        Per-component fraction of variance explained.
    scores_z_ : ndarray (N, R1); scores_w_ : ndarray (N, J, R2)
        Function-scale predicted scores for the training subjects.
    gamma_z_, gamma_w_ : float; penalties_z_, penalties_w_ : list
        Selected tuning values.
    """

    def __init__(
        self,
        delta: float = 0.3,
        estimate_correlation: bool = True,
        gamma="auto",
        alpha="auto",
        lam="auto",
        tuning_mode: str = "cv",
        rfve_floor: float = 0.7,
        n_components=None,
        fve_threshold: float = 0.75,
        max_components: int = 8,
        n_folds: int = 5,
        tau: float = None,
        omega: float = 1e-5,
        max_iter: int = 2000,
        random_state: int = 0,
    ):
        self.delta = delta
        self.estimate_correlation = estimate_correlation
        self.gamma = gamma
        self.alpha = alpha
        self.lam = lam
        self.tuning_mode = tuning_mode
        self.rfve_floor = rfve_floor
        self.n_components = n_components
        self.fve_threshold = fve_threshold
        self.max_components = max_components
        self.n_folds = n_folds
        self.tau = tau
        self.omega = omega
        self.max_iter = max_iter
        self.random_state = random_state

    def _as_dataset(self, X) -> FunctionalDataset:
        if isinstance(X, FunctionalDataset):
            return X
        values = np.asarray(X, dtype=float)
        if values.ndim != 4:
            raise ValueError(
                "X must be a FunctionalDataset or an (N, J, M, P) tensor, "
                f"got shape {values.shape}"
            )
        return FunctionalDataset(values, default_time_grid(values.shape[3]))

    def _requested_components(self):
        if self.n_components is None:
            return None, None
        if isinstance(self.n_components, int):
            return self.n_components, self.n_components
        r1, r2 = self.n_components
        return int(r1), int(r2)

    def fit(self, X, y=None):
        """Fit the decomposition to an (N, J, M, P) tensor or dataset."""
        ds = self._as_dataset(X)
        if self.tuning_mode not in ("cv", "rfve"):
            raise ValueError(f"tuning_mode must be 'cv' or 'rfve', got {self.tuning_mode!r}")
        if ds.demeaned:
            self.means_ = np.zeros(ds.values.shape[1:])
        else:
            self.means_ = replicate_means(ds)
            ds = demean_by_replicate(ds)
        self._dims_ = ds.values.shape

        if self.estimate_correlation:
            correlation = estimate_rho(ds, self.delta)
        else:
            correlation = ReplicateCorrelation.identity(ds.n_replicates)
        pair = estimate_covariances(ds, correlation)
        sigma2 = estimate_noise_variance(pair)
        self._correlation_ = correlation
        self.rho_ = correlation.rho
        self.dissociation_ = correlation.F_hat
        self.delta_set_ = correlation.delta_set
        self.c_ = pair.c
        self.sigma2_ = sigma2
        self.cov_z_ = pair.K_z
        self.cov_w_ = pair.K_w
        self.cov_pair_ = pair

        needs_cv = self.gamma == "auto" or (
            (self.alpha == "auto" or self.lam == "auto") and self.tuning_mode == "cv"
        )
        folds = (
            FoldCovariances(ds, correlation, self.n_folds, self.random_state)
            if needs_cv
            else None
        )

        requested = dict(zip(_LEVELS, self._requested_components()))
        for level, suffix in (("subject", "z"), ("replicate", "w")):
            fitted = self._fit_level(ds, correlation, pair, folds, level, requested[level])
            for name, value in fitted.items():
                setattr(self, f"{name}_{suffix}_", value)

        score_set = blup_scores(
            ds, self.components_z_, self.components_w_, correlation, sigma2
        )
        empirical_eigenvalues(score_set)
        root_p = np.sqrt(ds.n_points)
        self.scores_z_ = score_set.xi_z / root_p
        self.scores_w_ = score_set.xi_w / root_p
        self.eigenvalues_empirical_z_ = score_set.theta_z / ds.n_points
        self.eigenvalues_empirical_w_ = score_set.theta_w / ds.n_points
        return self

    def _fit_level(self, ds, correlation, pair, folds, level, n_requested):
        kmat = pair.level(level)
        config = TuningConfig(
            n_folds=self.n_folds, rfve_floor=self.rfve_floor, mode=self.tuning_mode
        )
        if self.gamma == "auto":
            gamma, gamma_details = select_gamma_cv(
                ds,
                correlation,
                level,
                config,
                self.random_state,
                fold_covariances=folds,
                k_full=kmat,
                omega=self.omega,
                max_iter=self.max_iter,
                return_details=True,
            )
        else:
            gamma = float(self.gamma)
            gamma_details = {"grid": np.array([gamma]), "objectives": np.array([np.nan])}

        tau = self.tau if self.tau is not None else default_tau(kmat)
        totv = total_variation(kmat, gamma, ds.n_variates)
        auto_pairs = self.alpha == "auto" or self.lam == "auto"
        search = None
        if auto_pairs and self.tuning_mode == "cv":
            axis_alpha = None if self.alpha == "auto" else [float(self.alpha)]
            axis_lam = None if self.lam == "auto" else [float(self.lam)]
            search = PenaltySearchCV(
                ds,
                correlation,
                level,
                gamma,
                TuningConfig(
                    n_folds=self.n_folds,
                    alpha_lambda_grid=(axis_alpha, axis_lam),
                    mode="cv",
                ),
                self.random_state,
                fold_covariances=folds,
                k_full=kmat,
                omega=self.omega,
                max_iter=self.max_iter,
            )

        cap = n_requested if n_requested is not None else self.max_components
        cap = min(cap, kmat.shape[0])
        deflation = _Deflation(None)
        components = []
        penalties = []
        fves = []
        rfves = []
        cumulative = 0.0
        for rank in range(1, cap + 1):
            rfve_value = None
            if search is not None:
                chosen = search.select_next()
                phi = search.full_components[-1]
                state = search.full_states[-1]
            else:
                if auto_pairs:  # rfve mode
                    pi = (
                        None
                        if deflation.basis is None
                        else deflation.basis @ deflation.basis.T
                    )
                    axis_alpha = None if self.alpha == "auto" else [float(self.alpha)]
                    axis_lam = None if self.lam == "auto" else [float(self.lam)]
                    chosen, rfve_details = select_alpha_lambda_rfve(
                        kmat,
                        gamma,
                        rank,
                        pi,
                        TuningConfig(
                            rfve_floor=self.rfve_floor,
                            mode="rfve",
                            alpha_lambda_grid=(axis_alpha, axis_lam),
                        ),
                        n_variates=ds.n_variates,
                        tau=tau,
                        omega=self.omega,
                        max_iter=self.max_iter,
                        return_details=True,
                    )
                    for pair_al, value in rfve_details.get("rfve_path", []):
                        if pair_al == chosen:
                            rfve_value = value
                else:
                    chosen = (float(self.alpha), float(self.lam))
                state = _admm(
                    kmat,
                    gamma,
                    chosen[0],
                    chosen[1],
                    deflation,
                    n_variates=ds.n_variates,
                    tau=tau,
                    omega=self.omega,
                    max_iter=self.max_iter,
                )
                phi = leading_sparse_eigenvector(state.A)
                deflation.add(phi)
            theta = max(0.0, float(phi @ kmat @ phi))
            fve = theta / totv if totv > 0 else 0.0
            components.append(
                Component(
                    phi=phi,
                    level=level,
                    penalties=(gamma, chosen[0], chosen[1]),
                    theta=theta,
                    fve=fve,
                    converged=state.converged,
                    iterations=state.iterations,
                    residual_primal=state.residual_primal,
                    residual_dual=state.residual_dual,
                )
            )
            penalties.append(chosen)
            fves.append(fve)
            rfves.append(rfve_value)
            cumulative += fve
            if n_requested is None and cumulative >= self.fve_threshold:
                break

        plugin = plugin_eigenvalues(kmat, components)
        for comp, theta in zip(components, plugin):
            comp.theta = float(theta)
        root_p = np.sqrt(ds.n_points)
        return {
            "gamma": gamma,
            "gamma_details": gamma_details,
            "components": components,
            "penalties": penalties,
            "fve": np.asarray(fves),
            "rfve": rfves,
            "eigenfunctions": np.vstack([c.phi for c in components]) * root_p,
            "eigenvalues": plugin / ds.n_points,
        }

    def transform(self, X):
        """Function-scale scores for new subjects, stacked per subject.

        Columns are the R1 subject-level scores followed by the J blocks of
        R2 replicate-level scores.  The per-replicate means learned during
        fit are subtracted first.
        """
        check_is_fitted(self, "components_z_")
        ds = self._as_dataset(X)
        if ds.values.shape[1:] != self._dims_[1:]:
            raise ValueError(
                f"X has per-subject shape {ds.values.shape[1:]}, "
                f"expected {self._dims_[1:]}"
            )
        if not ds.demeaned:
            centered = ds.values - self.means_[None]
            ds = FunctionalDataset(centered, ds.time_grid, demeaned=False)
            object.__setattr__(ds, "demeaned", True)
        score_set = blup_scores(
            ds, self.components_z_, self.components_w_, self._correlation_, self.sigma2_
        )
        n = ds.n_subjects
        root_p = np.sqrt(ds.n_points)
        return np.hstack(
            [score_set.xi_z / root_p, score_set.xi_w.reshape(n, -1) / root_p]
        )

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
