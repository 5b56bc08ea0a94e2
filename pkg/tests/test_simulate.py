import numpy as np
import pytest

from locfpca.errors import NotPSD, RankMismatch
from locfpca.simulate import (
    MethodSpec,
    SimulationConfig,
    bspline_basis,
    evaluate_components,
    generate_dataset,
    rho_matrix,
    true_eigenfunctions,
)
from locfpca.solver import Component


def textbook_bspline(index, t, knots, degree=3):
    """Independent recursive evaluation (standard two-term recursion)."""
    def rec(i, k, x):
        if k == 0:
            if knots[i] <= x < knots[i + 1]:
                return 1.0
            if x == knots[-1] and knots[i] < knots[i + 1] == knots[-1]:
                return 1.0
            return 0.0
        total = 0.0
        if knots[i + k] > knots[i]:
            total += (x - knots[i]) / (knots[i + k] - knots[i]) * rec(i, k - 1, x)
        if knots[i + k + 1] > knots[i + 1]:
            total += (
                (knots[i + k + 1] - x)
                / (knots[i + k + 1] - knots[i + 1])
                * rec(i + 1, k - 1, x)
            )
        return total

    return rec(index - 1, degree, t)


def test_bspline_partition_of_unity():
    t = np.linspace(0.0, 1.0, 73)
    total = sum(bspline_basis(b, t) for b in range(1, 21))
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_bspline_compact_support():
    knots = np.concatenate([np.zeros(4), np.arange(1, 17) / 17.0, np.ones(4)])
    t = np.linspace(0.0, 1.0, 211)
    for b in (1, 4, 11, 20):
        values = bspline_basis(b, t)
        lo, hi = knots[b - 1], knots[b + 3]
        outside = (t < lo - 1e-12) | (t > hi + 1e-12)
        assert np.all(values[outside] == 0.0)


@pytest.mark.parametrize("t", [0.25, 0.5, 0.75])
def test_bspline_matches_textbook_recursion(t):
    knots = np.concatenate([np.zeros(4), np.arange(1, 17) / 17.0, np.ones(4)])
    for b in range(1, 21):
        expected = textbook_bspline(b, t, knots)
        assert bspline_basis(b, t) == pytest.approx(expected, abs=1e-12)


def test_bspline_index_out_of_range():
    with pytest.raises(IndexError):
        bspline_basis(0, 0.5)
    with pytest.raises(IndexError):
        bspline_basis(21, 0.5)


def test_true_eigenfunctions_normalized_with_exact_zeros():
    cfg = SimulationConfig(n_points=50)
    phi_z, phi_w = true_eigenfunctions(cfg)
    assert phi_z.shape == (3, 200)
    np.testing.assert_allclose(
        np.linalg.norm(phi_z, axis=1), np.sqrt(50), atol=1e-10
    )
    # leading subject-level curve lives on variate 1 only
    curve = phi_z[0].reshape(4, 50)
    assert np.all(curve[1:] == 0.0)
    assert (curve[0] != 0).sum() > 5


def test_true_eigenfunctions_nearly_orthogonal():
    cfg = SimulationConfig(n_points=100)
    for mat in true_eigenfunctions(cfg):
        gram = np.abs(mat @ mat.T) / 100
        np.fill_diagonal(gram, 0.0)
        assert gram.max() <= 0.05


def test_generate_reconstruction_identity():
    cfg = SimulationConfig(
        n_subjects=5, n_replicates=2, n_variates=3, n_points=20,
        n_components_z=1, n_components_w=1, sigma2=0.0, seed=3,
    )
    ds, truth = generate_dataset(cfg)
    flat = ds.values.reshape(5, 2, -1)
    rebuilt = (
        truth.xi_z[:, None, 0, None] * truth.phi_z[0][None, None, :]
        + truth.xi_w[:, :, 0, None] * truth.phi_w[0][None, None, :]
    )
    np.testing.assert_allclose(flat, rebuilt, atol=1e-12)


def test_generate_deterministic():
    cfg = SimulationConfig(n_subjects=6, n_replicates=3, n_variates=3, n_points=12, seed=11)
    a, _ = generate_dataset(cfg)
    b, _ = generate_dataset(cfg)
    np.testing.assert_array_equal(a.values, b.values)


def test_generate_score_moments():
    cfg = SimulationConfig(
        n_subjects=100_000, n_replicates=2, n_variates=3, n_points=24,
        n_components_z=1, n_components_w=1, rho_lags=(0.5,), sigma2=0.0, seed=0,
    )
    ds, truth = generate_dataset(cfg)
    assert truth.xi_z[:, 0].var() == pytest.approx(1.0, rel=0.01)
    corr = np.corrcoef(truth.xi_w[:, 0, 0], truth.xi_w[:, 1, 0])[0, 1]
    assert corr == pytest.approx(0.5, abs=0.02)


def test_rho_matrix_lags():
    cfg = SimulationConfig(n_replicates=5)
    rho = rho_matrix(cfg)
    assert rho[0, 1] == 0.5 and rho[0, 2] == 0.3 and rho[0, 3] == 0.0
    np.testing.assert_array_equal(rho, rho.T)
    assert np.linalg.eigvalsh(rho).min() > 0


def test_generate_rejects_non_psd_rho():
    cfg = SimulationConfig(n_replicates=3, rho_lags=(0.9, -0.9))
    with pytest.raises(NotPSD):
        generate_dataset(cfg)


def _component_from(vec):
    vec = np.asarray(vec, dtype=float)
    return Component(phi=vec / np.linalg.norm(vec), level="subject", penalties=(0, 0, 0))


def test_evaluate_perfect_recovery():
    truth = np.zeros((1, 8))
    truth[0, 1:4] = [1.0, 2.0, 1.0]
    truth *= np.sqrt(8) / np.linalg.norm(truth)
    comp = _component_from(truth[0])
    out = evaluate_components([comp], truth)
    assert out[0]["error"] == pytest.approx(0.0, abs=1e-10)
    assert out[0]["specificity"] == 1.0
    assert out[0]["sensitivity"] == 1.0


def test_evaluate_sign_alignment():
    truth = np.zeros((1, 6))
    truth[0, :3] = [1.0, -1.0, 0.5]
    truth *= np.sqrt(6) / np.linalg.norm(truth)
    comp = _component_from(-truth[0])
    out = evaluate_components([comp], truth)
    assert out[0]["error"] == pytest.approx(0.0, abs=1e-10)


def test_evaluate_rank_mismatch():
    truth = np.ones((2, 4))
    with pytest.raises(RankMismatch):
        evaluate_components([_component_from(np.ones(4))], truth)


@pytest.mark.slow
def test_method_grid_parallel_matches_serial():
    # per-run derived seeds and ordered aggregation make worker count moot
    from locfpca.simulate import run_method_grid

    cfg = SimulationConfig(
        n_subjects=24, n_replicates=5, n_variates=3, n_points=12,
        n_components_z=2, n_components_w=2, seed=3,
    )
    serial = run_method_grid(cfg, ("00r",), n_runs=2, n_workers=1)
    parallel = run_method_grid(cfg, ("00r",), n_runs=2, n_workers=2)
    assert serial == parallel


def test_method_labels_round_trip():
    for label in ("alr", "a0r", "0lr", "00r", "al0", "a00", "0l0", "000"):
        assert MethodSpec.from_label(label).label == label
    with pytest.raises(ValueError):
        MethodSpec.from_label("xyz")
