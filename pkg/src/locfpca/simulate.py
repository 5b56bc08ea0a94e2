"""Synthetic multilevel multivariate data and the method-comparison harness.

The default design plants three subject-level and three replicate-level
eigenfunctions built from cubic B-splines and trigonometric curves, with
geometrically decaying variances, a lag-structured replicate correlation
and white observation noise.  Discretized eigenfunctions are normalized to
Euclidean norm sqrt(P), the grid analogue of unit function norm, so
eigenvalues and scores generated here live on the function scale; the
matrix-scale quantities produced by the fitting pipeline relate through
``matrix eigenvalue = P * theta`` and ``matrix score = sqrt(P) * xi``.

The method grid reruns the full pipeline under the eight estimator
variants obtained by switching off the variate-sparsity penalty, the
time-localization penalty, and/or the replicate-correlation adjustment.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .correlation import ReplicateCorrelation, estimate_rho
from .covariance import estimate_covariances, estimate_noise_variance
from .dataset import FunctionalDataset, default_time_grid, demean_by_replicate
from .errors import NotPSD, RankMismatch
from .scores import blup_scores, empirical_eigenvalues, plugin_eigenvalues
from .solver import extract_components
from .tuning import FoldCovariances, PenaltySearchCV, TuningConfig, select_gamma_cv

__all__ = [
    "SimulationConfig",
    "GroundTruth",
    "MethodSpec",
    "METHOD_LABELS",
    "bspline_basis",
    "generate_dataset",
    "true_eigenfunctions",
    "evaluate_components",
    "run_method_grid",
    "summarize_results",
]

# Cubic basis on [0, 1] with 16 equally spaced interior knots -> 20 functions.
BSPLINE_KNOTS = np.concatenate([np.zeros(4), np.arange(1, 17) / 17.0, np.ones(4)])
N_BSPLINE_BASIS = BSPLINE_KNOTS.size - 4  # 20
_DEGREE = 3


def _bspline_all(t: np.ndarray) -> np.ndarray:
    """All 20 cubic basis values at each t, by the iterative recurrence."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    knots = BSPLINE_KNOTS
    n_cells = knots.size - 1
    basis = np.zeros((t.size, n_cells))
    for i in range(n_cells):
        if knots[i] < knots[i + 1]:
            basis[:, i] = (knots[i] <= t) & (t < knots[i + 1])
    # close the final nonempty span so the basis sums to one at t = 1
    last = np.nonzero(np.diff(knots) > 0)[0][-1]
    basis[t == knots[-1], last] = 1.0
    for degree in range(1, _DEGREE + 1):
        lifted = np.zeros((t.size, n_cells - degree))
        for i in range(n_cells - degree):
            left = knots[i + degree] - knots[i]
            if left > 0:
                lifted[:, i] += (t - knots[i]) / left * basis[:, i]
            right = knots[i + degree + 1] - knots[i + 1]
            if right > 0:
                lifted[:, i] += (knots[i + degree + 1] - t) / right * basis[:, i + 1]
        basis = lifted
    return basis


def bspline_basis(index: int, t):
    """Value of the 1-based cubic basis function at t (scalar or array).

    Raises
    ------
    IndexError
        If ``index`` is outside 1..20.
    """
    if not 1 <= index <= N_BSPLINE_BASIS:
        raise IndexError(f"basis index must be in 1..{N_BSPLINE_BASIS}, got {index}")
    values = _bspline_all(t)[:, index - 1]
    return float(values[0]) if np.isscalar(t) else values


def _sine(t):
    return np.sqrt(2.0) * np.sin(2.0 * np.pi * np.asarray(t, dtype=float))


def _cos_ramp(t):
    t = np.asarray(t, dtype=float)
    return np.sqrt(2.0) * np.cos(np.pi * (t - 0.75)) * np.maximum(t - 0.75, 0.0)


def _basis_curve(index):
    return lambda t: bspline_basis(index, np.atleast_1d(t))


# (rank -> {1-based variate -> curve}); variates not listed are identically zero.
DEFAULT_SUBJECT_CURVES = (
    {1: _basis_curve(4)},
    {2: _basis_curve(7)},
    {3: _sine},
)
DEFAULT_REPLICATE_CURVES = (
    {2: _basis_curve(9)},
    {3: _basis_curve(12)},
    {1: _cos_ramp, 2: _cos_ramp, 3: _cos_ramp},
)


@dataclass(frozen=True)
class SimulationConfig:
    """Design of the synthetic data generator.

    ``rho_lags`` gives the replicate correlation at lag 1, 2, ...;
    ``theta_decay`` sets eigenvalues decay**(r-1) at both levels.
    ``eigenfunctions`` optionally overrides the planted curves as a pair
    of tuples of {variate -> callable} dicts (subject level first).
    """

    n_subjects: int = 100
    n_replicates: int = 5
    n_variates: int = 4
    n_points: int = 100
    n_components_z: int = 3
    n_components_w: int = 3
    theta_decay: float = 0.5
    rho_lags: tuple = (0.5, 0.3)
    sigma2: float = 1.0
    seed: int = 0
    eigenfunctions: tuple = None

    @property
    def theta_z(self) -> np.ndarray:
        return self.theta_decay ** np.arange(self.n_components_z)

    @property
    def theta_w(self) -> np.ndarray:
        return self.theta_decay ** np.arange(self.n_components_w)


@dataclass
class GroundTruth:
    """Everything the generator knows: curves, variances, correlation, scores."""

    phi_z: np.ndarray  # (R1, MP), norm sqrt(P), exact zeros preserved
    phi_w: np.ndarray  # (R2, MP)
    theta_z: np.ndarray
    theta_w: np.ndarray
    rho: np.ndarray
    xi_z: np.ndarray  # (N, R1), function scale
    xi_w: np.ndarray  # (N, J, R2)
    sigma2: float


def rho_matrix(config: SimulationConfig) -> np.ndarray:
    """Lag-banded replicate correlation from ``config.rho_lags``."""
    j = config.n_replicates
    rho = np.eye(j)
    for lag, value in enumerate(config.rho_lags, start=1):
        for a in range(j - lag):
            rho[a, a + lag] = rho[a + lag, a] = value
    return rho


def true_eigenfunctions(config: SimulationConfig):
    """Discretized planted eigenfunctions, each normalized to norm sqrt(P).

    Warns if two same-level curves overlap beyond |phi_r' phi_s| / P > 0.05.
    """
    grid = default_time_grid(config.n_points)
    if config.eigenfunctions is not None:
        curves_z, curves_w = config.eigenfunctions
    else:
        curves_z, curves_w = DEFAULT_SUBJECT_CURVES, DEFAULT_REPLICATE_CURVES
        if config.n_variates < 3:
            raise ValueError("default eigenfunctions need at least 3 variates")
    for count, curves, name in (
        (config.n_components_z, curves_z, "subject"),
        (config.n_components_w, curves_w, "replicate"),
    ):
        if count > len(curves):
            raise ValueError(
                f"{name} level requests {count} components but only "
                f"{len(curves)} curves are defined"
            )

    def build(curves, count):
        mat = np.zeros((count, config.n_variates, config.n_points))
        for rank in range(count):
            for variate, fn in curves[rank].items():
                if not 1 <= variate <= config.n_variates:
                    raise ValueError(f"variate {variate} outside 1..{config.n_variates}")
                mat[rank, variate - 1] = fn(grid)
        flat = mat.reshape(count, -1)
        norms = np.linalg.norm(flat, axis=1)
        if (norms == 0).any():
            raise ValueError("an eigenfunction is identically zero on the grid")
        return flat * (np.sqrt(config.n_points) / norms)[:, None]

    phi_z = build(curves_z, config.n_components_z)
    phi_w = build(curves_w, config.n_components_w)
    for name, mat in (("subject", phi_z), ("replicate", phi_w)):
        gram = np.abs(mat @ mat.T) / config.n_points
        np.fill_diagonal(gram, 0.0)
        if gram.max() > 0.05:
            warnings.warn(
                f"{name}-level planted curves overlap: max |phi_r' phi_s|/P "
                f"= {gram.max():.3f}"
            )
    return phi_z, phi_w


def generate_dataset(config: SimulationConfig):
    """Draw one dataset; returns (FunctionalDataset, GroundTruth).

    Scores are drawn first at the subject level, then jointly across
    replicates through the symmetric eigenvalue square root of the
    correlation matrix (draw order is fixed, so a fixed seed reproduces
    the tensor bit for bit), then white noise is added.

    Raises
    ------
    NotPSD
        If the lag correlation matrix is not positive semidefinite.
    """
    rho = rho_matrix(config)
    eigval, eigvec = np.linalg.eigh(rho)
    if eigval.min() < -1e-10:
        raise NotPSD(
            f"replicate correlation has eigenvalue {eigval.min():.3e} < 0"
        )
    sqrt_rho = (eigvec * np.sqrt(np.maximum(eigval, 0.0))) @ eigvec.T

    phi_z, phi_w = true_eigenfunctions(config)
    theta_z, theta_w = config.theta_z, config.theta_w
    n, j = config.n_subjects, config.n_replicates
    rng = np.random.default_rng(config.seed)
    xi_z = rng.standard_normal((n, theta_z.size)) * np.sqrt(theta_z)
    base = rng.standard_normal((n, j, theta_w.size))
    xi_w = np.einsum("jk,nkr->njr", sqrt_rho, base) * np.sqrt(theta_w)
    signal = xi_z @ phi_z
    curves = signal[:, None, :] + np.einsum("njr,rq->njq", xi_w, phi_w)
    if config.sigma2 > 0:
        curves = curves + np.sqrt(config.sigma2) * rng.standard_normal(curves.shape)
    values = curves.reshape(n, j, config.n_variates, config.n_points)
    ds = FunctionalDataset(values, default_time_grid(config.n_points))
    truth = GroundTruth(
        phi_z=phi_z,
        phi_w=phi_w,
        theta_z=theta_z,
        theta_w=theta_w,
        rho=rho,
        xi_z=xi_z,
        xi_w=xi_w,
        sigma2=config.sigma2,
    )
    return ds, truth


def evaluate_components(estimated, truth_phi: np.ndarray):
    """Per-rank error, specificity and sensitivity against the planted curves.

    Truth and estimate are both rescaled to Euclidean norm sqrt(MP) and
    sign-aligned before the error is taken; this is the scale on which the
    benchmark errors are comparable (errors can approach 2*sqrt(MP) for
    orthogonal estimates).  Specificity is the fraction of true zeros
    estimated exactly zero; sensitivity the fraction of true nonzeros
    estimated nonzero — both scale-free.

    Raises
    ------
    RankMismatch
        If the number of estimates differs from the number of truths.
    """
    truth_phi = np.asarray(truth_phi, dtype=float)
    if len(estimated) != truth_phi.shape[0]:
        raise RankMismatch(
            f"{len(estimated)} estimated vs {truth_phi.shape[0]} true components"
        )
    out = []
    scale = np.sqrt(truth_phi.shape[1])
    for rank, comp in enumerate(estimated):
        truth = truth_phi[rank]
        truth = truth * (scale / np.linalg.norm(truth))
        est = comp.phi * scale
        if est @ truth < 0:
            est = -est
        true_zero = truth == 0.0
        specificity = (
            float(np.mean(est[true_zero] == 0.0)) if true_zero.any() else np.nan
        )
        sensitivity = (
            float(np.mean(est[~true_zero] != 0.0)) if (~true_zero).any() else np.nan
        )
        out.append(
            {
                "rank": rank + 1,
                "error": float(np.linalg.norm(truth - est)),
                "specificity": specificity,
                "sensitivity": sensitivity,
            }
        )
    return out


@dataclass(frozen=True)
class MethodSpec:
    """One of the eight estimator variants.

    Labels encode the switches: 'a' = variate-sparsity penalty tuned,
    'l' = localization penalty tuned, 'r' = replicate correlation
    estimated; '0' in a slot forces that ingredient to zero.  The full
    method is 'alr'; plain smoothed decomposition ignoring correlation
    is '000'.
    """

    use_alpha: bool
    use_lambda: bool
    use_rho: bool

    @property
    def label(self) -> str:
        return (
            ("a" if self.use_alpha else "0")
            + ("l" if self.use_lambda else "0")
            + ("r" if self.use_rho else "0")
        )

    @classmethod
    def from_label(cls, label: str) -> "MethodSpec":
        if len(label) != 3 or label[0] not in "a0" or label[1] not in "l0" or label[2] not in "r0":
            raise ValueError(f"unknown method label {label!r}")
        return cls(label[0] == "a", label[1] == "l", label[2] == "r")


METHOD_LABELS = ("alr", "a0r", "0lr", "00r", "al0", "a00", "0l0", "000")

_LEVELS = ("subject", "replicate")


def _single_run(args):
    (config, run_idx, specs, delta, tuning, omega, max_iter) = args
    run_config = replace(config, seed=config.seed + run_idx)
    ds_raw, truth = generate_dataset(run_config)
    ds = demean_by_replicate(ds_raw)
    truth_phi = {"subject": truth.phi_z, "replicate": truth.phi_w}
    truth_theta = {"subject": truth.theta_z, "replicate": truth.theta_w}
    n_comp = {
        "subject": config.n_components_z,
        "replicate": config.n_components_w,
    }
    p = config.n_points

    shared = {}
    for use_rho in sorted({spec.use_rho for spec in specs}, reverse=True):
        rho = (
            estimate_rho(ds, delta)
            if use_rho
            else ReplicateCorrelation.identity(config.n_replicates)
        )
        pair = estimate_covariances(ds, rho)
        sigma2 = estimate_noise_variance(pair)
        folds = FoldCovariances(ds, rho, tuning.n_folds, run_config.seed)
        gammas = {
            level: select_gamma_cv(
                ds,
                rho,
                level,
                tuning,
                run_config.seed,
                fold_covariances=folds,
                k_full=pair.level(level),
                omega=omega,
                max_iter=max_iter,
            )
            for level in _LEVELS
        }
        shared[use_rho] = (rho, pair, sigma2, folds, gammas)

    rows = []
    for spec in specs:
        rho, pair, sigma2, folds, gammas = shared[spec.use_rho]
        comps = {}
        for level in _LEVELS:
            kmat = pair.level(level)
            gamma = gammas[level]
            if spec.use_alpha or spec.use_lambda:
                explicit_a, explicit_l = tuning.alpha_lambda_grid or (None, None)
                method_tuning = replace(
                    tuning,
                    alpha_lambda_grid=(
                        explicit_a if spec.use_alpha else [0.0],
                        explicit_l if spec.use_lambda else [0.0],
                    ),
                )
                search = PenaltySearchCV(
                    ds,
                    rho,
                    level,
                    gamma,
                    method_tuning,
                    run_config.seed,
                    fold_covariances=folds,
                    k_full=kmat,
                    omega=omega,
                    max_iter=max_iter,
                )
                schedule = [search.select_next() for _ in range(n_comp[level])]
            else:
                schedule = [(0.0, 0.0)] * n_comp[level]
            comps[level] = extract_components(
                kmat,
                gamma,
                schedule,
                n_comp[level],
                n_variates=config.n_variates,
                level=level,
                omega=omega,
                max_iter=max_iter,
            )
            plugin = plugin_eigenvalues(kmat, comps[level])
            for comp, theta in zip(comps[level], plugin):
                comp.theta = float(theta)

        score_set = blup_scores(
            ds, comps["subject"], comps["replicate"], rho, sigma2
        )
        empirical_eigenvalues(score_set)
        emp_theta = {"subject": score_set.theta_z, "replicate": score_set.theta_w}
        est_scores = {"subject": score_set.xi_z, "replicate": score_set.xi_w}
        true_scores = {"subject": truth.xi_z, "replicate": truth.xi_w}

        for level in _LEVELS:
            metrics = evaluate_components(comps[level], truth_phi[level])
            for entry in metrics:
                rank = entry["rank"]
                for name in ("error", "specificity", "sensitivity"):
                    rows.append(
                        _row(run_idx, spec.label, level, rank, name, entry[name])
                    )
                comp = comps[level][rank - 1]
                rows.append(
                    _row(
                        run_idx,
                        spec.label,
                        level,
                        rank,
                        "theta_bias_plugin",
                        comp.theta / p - truth_theta[level][rank - 1],
                    )
                )
                rows.append(
                    _row(
                        run_idx,
                        spec.label,
                        level,
                        rank,
                        "theta_bias_empirical",
                        emp_theta[level][rank - 1] / p
                        - truth_theta[level][rank - 1],
                    )
                )
                sign = 1.0 if comp.phi @ truth_phi[level][rank - 1] >= 0 else -1.0
                if level == "subject":
                    est = est_scores[level][:, rank - 1] * sign
                    true = true_scores[level][:, rank - 1]
                else:
                    est = est_scores[level][:, :, rank - 1].ravel() * sign
                    true = true_scores[level][:, :, rank - 1].ravel()
                corr = float(np.corrcoef(est, true)[0, 1]) if est.std() > 0 else 0.0
                rows.append(_row(run_idx, spec.label, level, rank, "score_corr", corr))
    return rows


def _row(replicate, method, level, rank, metric, value):
    return {
        "replicate": int(replicate),
        "method": method,
        "level": level,
        "rank": int(rank),
        "metric": metric,
        "value": float(value),
    }


def run_method_grid(
    config: SimulationConfig,
    methods=("alr", "00r", "al0"),
    n_runs: int = 20,
    *,
    delta: float = 0.3,
    tuning: TuningConfig = None,
    omega: float = 1e-5,
    max_iter: int = 2000,
    n_workers: int = 1,
):
    """Run the full pipeline under several estimator variants.

    Each Monte Carlo run draws a dataset with seed ``config.seed + run``,
    shares the correlation/covariance/smoothing stage across methods that
    agree on the correlation switch, and emits one tidy row per
    (run, method, level, rank, metric).  Runs execute in parallel when
    ``n_workers`` > 1; aggregation order is fixed by run index either way.
    """
    specs = tuple(
        spec if isinstance(spec, MethodSpec) else MethodSpec.from_label(spec)
        for spec in methods
    )
    tuning = tuning or TuningConfig(cv_omega=1e-4, cv_max_iter=600)
    jobs = [
        (config, run_idx, specs, delta, tuning, omega, max_iter)
        for run_idx in range(n_runs)
    ]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            per_run = list(pool.map(_single_run, jobs))
    else:
        per_run = [_single_run(job) for job in jobs]
    rows = []
    for chunk in per_run:
        rows.extend(chunk)
    return rows


def summarize_results(rows):
    """Median and median absolute deviation per (method, level, rank, metric)."""
    groups = {}
    for row in rows:
        key = (row["method"], row["level"], row["rank"], row["metric"])
        groups.setdefault(key, []).append(row["value"])
    summary = {}
    for key in sorted(groups):
        values = np.asarray(groups[key], dtype=float)
        values = values[~np.isnan(values)]
        if values.size == 0:
            continue
        med = float(np.median(values))
        mad = float(np.median(np.abs(values - med)))
        method, level, rank, metric = key
        summary.setdefault(method, {}).setdefault(level, {}).setdefault(
            str(rank), {}
        )[metric] = {"median": med, "mad": mad, "n": int(values.size)}
    return summary
