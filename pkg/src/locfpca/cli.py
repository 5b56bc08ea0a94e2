"""Command-line pipeline: simulate, estimate-rho, tune, fit, scores, report.

Every subcommand is runnable standalone given the outputs of earlier
stages.  A JSON config file can set any option; command-line flags win
over the file.  Exit codes: 0 success, 1 computation failure, 2 invalid
configuration.  Output files are written atomically (temp file + rename)
so partial files never appear.
"""

from __future__ import annotations

import json
import os
import sys
import time

import click
import numpy as np

from . import __version__
from .correlation import ReplicateCorrelation, dissociation_profile, estimate_rho
from .dataset import load_dataset, write_dataset
from .errors import ConfigError, LocfpcaError
from .estimator import LocalizedMultilevelFPCA
from .reports import (
    read_eigenfunctions_csv,
    read_json,
    read_matrix_csv,
    write_eigenfunctions_csv,
    write_json,
    write_matrix_csv,
    write_profile_csv,
    write_results_csv,
    write_scores_csv,
)
from .scores import blup_scores
from .simulate import (
    METHOD_LABELS,
    SimulationConfig,
    generate_dataset,
    run_method_grid,
    summarize_results,
)
from .solver import Component
from .tuning import TuningConfig, tune_penalties

_CONFIG_SCHEMA = {
    "input": str,
    "format": str,
    "output": str,
    "delta": float,
    "estimate_correlation": bool,
    "gamma": (str, float),
    "alpha": (str, float),
    "lambda": (str, float),
    "tuning": {
        "mode": str,
        "rfve_floor": float,
        "n_folds": int,
    },
    "ranks": (str, list),
    "fve_threshold": float,
    "max_components": int,
    "solver": {
        "tau": (float, type(None)),
        "omega": float,
        "max_iter": int,
    },
    "seed": int,
    "threads": int,
}

_DEFAULT_CONFIG = {
    "input": None,
    "format": "long-csv",
    "output": None,
    "delta": 0.3,
    "estimate_correlation": True,
    "gamma": "auto",
    "alpha": "auto",
    "lambda": "auto",
    "tuning": {"mode": "cv", "rfve_floor": 0.7, "n_folds": 5},
    "ranks": "auto",
    "fve_threshold": 0.75,
    "max_components": 8,
    "solver": {"tau": None, "omega": 1e-5, "max_iter": 2000},
    "seed": 0,
    "threads": 1,
}


def _validate_config(payload: dict, schema: dict, prefix: str = "") -> None:
    for key, value in payload.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a table")
            _validate_config(value, expected, prefix=f"{path}.")
        else:
            types = expected if isinstance(expected, tuple) else (expected,)
            widened = tuple(
                (int, float) if t is float else (t,) for t in types
            )
            flat = tuple(t for group in widened for t in group)
            if value is not None and not isinstance(value, flat):
                if not (type(None) in types and value is None):
                    raise ConfigError(
                        f"config key {path} has invalid type {type(value).__name__}"
                    )


def _load_config(path) -> dict:
    merged = json.loads(json.dumps(_DEFAULT_CONFIG))  # deep copy
    if path:
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config file must contain a JSON object")
        _validate_config(payload, _CONFIG_SCHEMA)
        for key, value in payload.items():
            if isinstance(value, dict):
                merged[key].update(value)
            else:
                merged[key] = value
    return merged


def _parse_penalty(text):
    if text is None or text == "auto":
        return text
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"penalty must be 'auto' or a number, got {text!r}") from exc


def _parse_ranks(value):
    if value is None or value == "auto":
        return None
    if isinstance(value, (list, tuple)):
        pair = list(value)
    else:
        pair = str(value).split(",")
    if len(pair) == 1:
        pair = [pair[0], pair[0]]
    if len(pair) != 2:
        raise ConfigError(f"ranks must be 'auto', R, or R1,R2; got {value!r}")
    try:
        return int(pair[0]), int(pair[1])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ranks must be integers, got {value!r}") from exc


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _verbose() -> bool:
    # LOCFPCA_VERBOSE is the only environment knob: progress notes to stderr
    return bool(os.environ.get("LOCFPCA_VERBOSE"))


def _note(message: str) -> None:
    if _verbose():
        click.echo(message, err=True)


def _fail(exc: BaseException) -> None:
    code = 2 if isinstance(exc, (ConfigError, click.UsageError)) else 1
    click.echo(f"error[{type(exc).__name__}]: {exc}", err=True)
    sys.exit(code)


@click.group(name="locfpca")
@click.version_option(__version__)
def main():
    """Localized sparse-variate PCA for multilevel multivariate functional data."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--replicates", "n_runs", default=20, show_default=True, help="Monte Carlo runs.")
@click.option("--methods", default="alr,00r,al0", show_default=True,
              help=f"Comma-separated method labels from {','.join(METHOD_LABELS)}.")
@click.option("--n-subjects", default=100, show_default=True)
@click.option("--n-replicates", default=5, show_default=True)
@click.option("--n-variates", default=4, show_default=True)
@click.option("--n-points", default=100, show_default=True)
@click.option("--sigma2", default=1.0, show_default=True)
@click.option("--theta-decay", default=0.5, show_default=True)
@click.option("--ranks", default=3, show_default=True, help="Planted components per level.")
@click.option("--delta", default=0.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=None, type=int, help="Worker processes (default: machine).")
@click.option("--data-only", is_flag=True, help="Only write one generated dataset.")
@click.option("--data-format", default="long-csv", type=click.Choice(["long-csv", "binary"]),
              show_default=True)
def simulate(out_dir, n_runs, methods, n_subjects, n_replicates, n_variates, n_points,
             sigma2, theta_decay, ranks, delta, seed, threads, data_only, data_format):
    """Run the planted-model experiment (or emit one simulated dataset)."""
    try:
        config = SimulationConfig(
            n_subjects=n_subjects,
            n_replicates=n_replicates,
            n_variates=n_variates,
            n_points=n_points,
            n_components_z=ranks,
            n_components_w=ranks,
            theta_decay=theta_decay,
            sigma2=sigma2,
            seed=seed,
        )
        os.makedirs(out_dir, exist_ok=True)
        if data_only:
            ds, _ = generate_dataset(config)
            ext = "csv" if data_format == "long-csv" else "bin"
            path = os.path.join(out_dir, f"dataset.{ext}")
            write_dataset(ds, path, format=data_format)
            click.echo(f"wrote {path}")
            return
        workers = threads if threads is not None else (os.cpu_count() or 1)
        _limit_threads(1 if workers > 1 else workers)
        labels = [m.strip() for m in methods.split(",") if m.strip()]
        started = time.time()
        rows = run_method_grid(
            config,
            labels,
            n_runs=n_runs,
            delta=delta,
            tuning=TuningConfig(cv_omega=1e-4, cv_max_iter=600),
            n_workers=workers,
        )
        write_results_csv(os.path.join(out_dir, "results.csv"), rows)
        summary = {
            "config": {
                "n_subjects": n_subjects, "n_replicates": n_replicates,
                "n_variates": n_variates, "n_points": n_points,
                "sigma2": sigma2, "theta_decay": theta_decay,
                "ranks": ranks, "delta": delta, "seed": seed,
                "runs": n_runs, "methods": labels,
            },
            "summary": summarize_results(rows),
            "timings": {"total_seconds": time.time() - started},
        }
        write_json(os.path.join(out_dir, "summary.json"), summary)
        click.echo(f"wrote {out_dir}/results.csv and summary.json")
    except (LocfpcaError, OSError, ValueError) as exc:
        _fail(exc)


@main.command(name="estimate-rho")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", default="long-csv", type=click.Choice(["long-csv", "binary"]),
              show_default=True)
@click.option("--delta", default=0.3, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def estimate_rho_cmd(input_path, fmt, delta, out_dir):
    """Estimate the replicate correlation matrix and the dissociation profile."""
    try:
        from .dataset import demean_by_replicate

        ds = load_dataset(input_path, format=fmt)
        ds = demean_by_replicate(ds)
        rho = estimate_rho(ds, delta)
        os.makedirs(out_dir, exist_ok=True)
        write_matrix_csv(os.path.join(out_dir, "rho.csv"), rho.rho)
        write_profile_csv(
            os.path.join(out_dir, "dissociation_profile.csv"),
            dissociation_profile(rho.F_hat),
        )
        click.echo(f"wrote {out_dir}/rho.csv and dissociation_profile.csv")
    except (LocfpcaError, OSError, ValueError) as exc:
        _fail(exc)


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", default="long-csv", type=click.Choice(["long-csv", "binary"]),
              show_default=True)
@click.option("--level", default="both", type=click.Choice(["subject", "replicate", "both"]),
              show_default=True)
@click.option("--mode", default="cv", type=click.Choice(["cv", "rfve"]), show_default=True)
@click.option("--rfve-floor", default=0.7, show_default=True)
@click.option("--ranks", default=3, show_default=True, help="Ranks to tune.")
@click.option("--delta", default=0.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def tune(input_path, fmt, level, mode, rfve_floor, ranks, delta, seed, out_dir):
    """Select gamma by cross-validation and (alpha_r, lambda_r) per rank."""
    try:
        from .dataset import demean_by_replicate

        ds = load_dataset(input_path, format=fmt)
        ds = demean_by_replicate(ds)
        rho = estimate_rho(ds, delta)
        config = TuningConfig(mode=mode, rfve_floor=rfve_floor)
        levels = ["subject", "replicate"] if level == "both" else [level]
        payload = {}
        for lvl in levels:
            result = tune_penalties(ds, rho, lvl, ranks, config, seed)
            payload[lvl] = {
                "gamma": result.gamma,
                "gamma_grid": list(result.gamma_grid),
                "gamma_objectives": list(result.gamma_objectives),
                "pairs": [list(p) for p in result.pairs],
                "rank_details": _jsonable(result.rank_details),
            }
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "tuning.json"), payload)
        click.echo(f"wrote {out_dir}/tuning.json")
    except (LocfpcaError, OSError, ValueError) as exc:
        _fail(exc)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config; flags override.")
@click.option("--input", "input_path", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["long-csv", "binary"]), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--delta", type=float, default=None)
@click.option("--no-correlation", "no_correlation", is_flag=True, default=False,
              help="Force the replicate correlation to zero.")
@click.option("--gamma", default=None, help="'auto' or a number.")
@click.option("--alpha", default=None, help="'auto' or a number.")
@click.option("--lambda", "lam", default=None, help="'auto' or a number.")
@click.option("--mode", type=click.Choice(["cv", "rfve"]), default=None)
@click.option("--rfve-floor", type=float, default=None)
@click.option("--ranks", default=None, help="'auto', R, or R1,R2.")
@click.option("--fve", "fve_threshold", type=float, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--omega", type=float, default=None)
@click.option("--max-iter", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
def fit(config_path, input_path, fmt, out_dir, delta, no_correlation, gamma, alpha, lam,
        mode, rfve_floor, ranks, fve_threshold, tau, omega, max_iter, seed, threads):
    """Run the full pipeline and write all outputs plus report.json."""
    try:
        cfg = _load_config(config_path)
        overrides = {
            "input": input_path, "format": fmt, "output": out_dir, "delta": delta,
            "gamma": _parse_penalty(gamma) if gamma is not None else None,
            "alpha": _parse_penalty(alpha) if alpha is not None else None,
            "lambda": _parse_penalty(lam) if lam is not None else None,
            "fve_threshold": fve_threshold, "seed": seed, "threads": threads,
        }
        for key, value in overrides.items():
            if value is not None:
                cfg[key] = value
        if no_correlation:
            cfg["estimate_correlation"] = False
        if mode is not None:
            cfg["tuning"]["mode"] = mode
        if rfve_floor is not None:
            cfg["tuning"]["rfve_floor"] = rfve_floor
        if ranks is not None:
            cfg["ranks"] = ranks
        if tau is not None:
            cfg["solver"]["tau"] = tau
        if omega is not None:
            cfg["solver"]["omega"] = omega
        if max_iter is not None:
            cfg["solver"]["max_iter"] = max_iter
        if not cfg["input"]:
            raise ConfigError("missing required key: input")
        if not cfg["output"]:
            raise ConfigError("missing required key: output")
        _run_fit(cfg)
    except (LocfpcaError, OSError, ValueError) as exc:
        _fail(exc)


def _run_fit(cfg: dict) -> None:
    _limit_threads(cfg["threads"])
    started = time.time()
    timings = {}
    t0 = time.time()
    ds = load_dataset(cfg["input"], format=cfg["format"])
    timings["load"] = time.time() - t0
    _note(f"loaded {cfg['input']}: dims {ds.dims}")

    model = LocalizedMultilevelFPCA(
        delta=cfg["delta"],
        estimate_correlation=cfg["estimate_correlation"],
        gamma=cfg["gamma"],
        alpha=cfg["alpha"],
        lam=cfg["lambda"],
        tuning_mode=cfg["tuning"]["mode"],
        rfve_floor=cfg["tuning"]["rfve_floor"],
        n_components=_parse_ranks(cfg["ranks"]),
        fve_threshold=cfg["fve_threshold"],
        max_components=cfg["max_components"],
        n_folds=cfg["tuning"]["n_folds"],
        tau=cfg["solver"]["tau"],
        omega=cfg["solver"]["omega"],
        max_iter=cfg["solver"]["max_iter"],
        random_state=cfg["seed"],
    )
    t0 = time.time()
    model.fit(ds)
    timings["fit"] = time.time() - t0
    _note(
        f"fit done in {timings['fit']:.1f}s: "
        f"R=({len(model.components_z_)}, {len(model.components_w_)}), "
        f"sigma2={model.sigma2_:.4g}"
    )

    out_dir = cfg["output"]
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    write_matrix_csv(os.path.join(out_dir, "rho.csv"), model.rho_)
    if model.dissociation_ is not None:
        write_profile_csv(
            os.path.join(out_dir, "dissociation_profile.csv"),
            dissociation_profile(model.dissociation_),
        )
    pair = model.cov_pair_
    for name, mat in (("K_z", pair.K_z), ("K_w", pair.K_w),
                      ("F_z", pair.F_z), ("F_w", pair.F_w)):
        write_matrix_csv(os.path.join(out_dir, f"{name}.csv"), mat)
    write_eigenfunctions_csv(
        os.path.join(out_dir, "eigenfunctions.csv"),
        {"subject": model.eigenfunctions_z_, "replicate": model.eigenfunctions_w_},
        ds.n_variates,
        ds.n_points,
    )
    root_p = np.sqrt(ds.n_points)
    write_scores_csv(
        os.path.join(out_dir, "scores.csv"), model.scores_z_, model.scores_w_
    )
    timings["write"] = time.time() - t0
    timings["total"] = time.time() - started

    report = _build_report(cfg, model, ds)
    report["timings"] = {k: round(v, 6) for k, v in timings.items()}
    write_json(os.path.join(out_dir, "report.json"), report)
    click.echo(f"wrote outputs to {out_dir}")


def _build_report(cfg: dict, model: LocalizedMultilevelFPCA, ds) -> dict:
    levels = {}
    for level, suffix in (("subject", "z"), ("replicate", "w")):
        comps = getattr(model, f"components_{suffix}_")
        eigenvalues = getattr(model, f"eigenvalues_{suffix}_")
        empirical = getattr(model, f"eigenvalues_empirical_{suffix}_")
        fve = getattr(model, f"fve_{suffix}_")
        rfve = getattr(model, f"rfve_{suffix}_")
        details = getattr(model, f"gamma_details_{suffix}_")
        entries = []
        for idx, comp in enumerate(comps):
            entries.append(
                {
                    "rank": idx + 1,
                    "alpha": comp.penalties[1],
                    "lambda": comp.penalties[2],
                    "theta": float(eigenvalues[idx]),
                    "theta_empirical": float(empirical[idx]),
                    "fve": float(fve[idx]),
                    "rfve": None if rfve[idx] is None else float(rfve[idx]),
                    "support_size": int(comp.support.sum()),
                    "iterations": int(comp.iterations),
                    "converged": bool(comp.converged),
                    "residual_primal": float(comp.residual_primal),
                    "residual_dual": float(comp.residual_dual),
                }
            )
        levels[level] = {
            "gamma": float(getattr(model, f"gamma_{suffix}_")),
            "gamma_grid": _jsonable(details["grid"]),
            "gamma_objectives": _jsonable(details["objectives"]),
            "n_components": len(comps),
            "cumulative_fve": float(np.sum(fve)),
            "components": entries,
        }
    settings = {key: cfg[key] for key in (
        "delta", "estimate_correlation", "gamma", "alpha", "lambda",
        "ranks", "fve_threshold", "max_components", "seed", "threads",
    )}
    settings["tuning"] = dict(cfg["tuning"])
    settings["solver"] = dict(cfg["solver"])
    return {
        "version": __version__,
        "dims": ds.dims,
        "settings": settings,
        "correlation": {
            "c": float(model.c_),
            "sigma2": float(model.sigma2_),
            "delta_set": [[a + 1, b + 1] for a, b in model.delta_set_],
        },
        "levels": levels,
    }


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", default="long-csv", type=click.Choice(["long-csv", "binary"]),
              show_default=True)
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True),
              help="Directory produced by a prior fit.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def scores(input_path, fmt, run_dir, out_dir):
    """Recompute scores for a dataset from a prior fit's components."""
    try:
        from .dataset import demean_by_replicate

        ds = load_dataset(input_path, format=fmt)
        ds = demean_by_replicate(ds)
        report = read_json(os.path.join(run_dir, "report.json"))
        rho = ReplicateCorrelation(rho=read_matrix_csv(os.path.join(run_dir, "rho.csv")))
        funcs, n_variates, n_points = read_eigenfunctions_csv(
            os.path.join(run_dir, "eigenfunctions.csv")
        )
        if (ds.n_variates, ds.n_points) != (n_variates, n_points):
            raise ConfigError(
                f"dataset dims (M={ds.n_variates}, P={ds.n_points}) do not match "
                f"the fitted components (M={n_variates}, P={n_points})"
            )
        comps = {}
        root_p = np.sqrt(n_points)
        for level in ("subject", "replicate"):
            entries = report["levels"][level]["components"]
            comps[level] = [
                Component(
                    phi=funcs[level][idx] / root_p,
                    level=level,
                    penalties=(report["levels"][level]["gamma"],
                               entry["alpha"], entry["lambda"]),
                    theta=entry["theta"] * n_points,
                )
                for idx, entry in enumerate(entries)
            ]
        score_set = blup_scores(
            ds,
            comps["subject"],
            comps["replicate"],
            rho,
            report["correlation"]["sigma2"],
        )
        os.makedirs(out_dir, exist_ok=True)
        write_scores_csv(
            os.path.join(out_dir, "scores.csv"),
            score_set.xi_z / root_p,
            score_set.xi_w / root_p,
        )
        click.echo(f"wrote {out_dir}/scores.csv")
    except (LocfpcaError, OSError, ValueError, KeyError) as exc:
        _fail(exc)


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
def report(run_dir):
    """Summarize a fit directory."""
    try:
        payload = read_json(os.path.join(run_dir, "report.json"))
        dims = payload["dims"]
        click.echo(
            f"locfpca {payload['version']}  "
            f"N={dims['N']} J={dims['J']} M={dims['M']} P={dims['P']}"
        )
        corr = payload["correlation"]
        click.echo(f"c={corr['c']:.4f}  sigma2={corr['sigma2']:.4f}")
        for level in ("subject", "replicate"):
            block = payload["levels"][level]
            click.echo(
                f"[{level}] gamma={block['gamma']:.4g}  "
                f"R={block['n_components']}  cumFVE={block['cumulative_fve']:.3f}"
            )
            for comp in block["components"]:
                rfve = "-" if comp["rfve"] is None else f"{comp['rfve']:.3f}"
                click.echo(
                    f"  r={comp['rank']} alpha={comp['alpha']:.4g} "
                    f"lambda={comp['lambda']:.4g} theta={comp['theta']:.4g} "
                    f"fve={comp['fve']:.3f} rfve={rfve} "
                    f"support={comp['support_size']} iters={comp['iterations']}"
                )
    except (OSError, ValueError, KeyError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
