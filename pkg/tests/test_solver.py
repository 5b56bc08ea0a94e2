import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locfpca.errors import InfeasibleDeflation, NotConvergedWarning
from locfpca.solver import (
    admm_solve,
    extract_components,
    leading_sparse_eigenvector,
    project_deflated_fantope,
    waterfill_threshold,
)


def random_psd(n, seed, spectrum=None):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if spectrum is None:
        spectrum = rng.uniform(0.1, 3.0, size=n)
        spectrum.sort()
        spectrum = spectrum[::-1]
    return (q * spectrum) @ q.T, q, np.asarray(spectrum, dtype=float)


def bisect_waterfill(lam):
    """Independent bisection oracle for the clipped-sum equation."""
    lo, hi = lam.min() - 2.0, lam.max()
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if np.clip(lam - mid, 0.0, 1.0).sum() >= 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_waterfill_properties(values):
    lam = np.asarray(values)
    theta = waterfill_threshold(lam)
    weights = np.clip(lam - theta, 0.0, 1.0)
    assert abs(weights.sum() - 1.0) < 1e-9
    assert np.all(weights >= 0.0) and np.all(weights <= 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_waterfill_matches_bisection(seed):
    lam = np.random.default_rng(seed).uniform(-2, 3, size=12)
    exact = waterfill_threshold(lam)
    approx = bisect_waterfill(lam)
    got = np.clip(lam - exact, 0, 1)
    want = np.clip(lam - approx, 0, 1)
    np.testing.assert_allclose(got, want, atol=1e-7)


def test_projection_fixed_point():
    mat = np.diag([0.6, 0.3, 0.1])
    np.testing.assert_allclose(project_deflated_fantope(mat), mat, atol=1e-12)


def test_projection_concentrates():
    out = project_deflated_fantope(np.diag([2.0, 1.0, 0.0]))
    np.testing.assert_allclose(out, np.diag([1.0, 0.0, 0.0]), atol=1e-12)


def test_projection_splits_ties():
    out = project_deflated_fantope(np.diag([0.9, 0.9, 0.0]))
    np.testing.assert_allclose(out, np.diag([0.5, 0.5, 0.0]), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_projection_feasibility_random(seed):
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((15, 15))
    mat = mat + mat.T
    out = project_deflated_fantope(mat)
    eig = np.linalg.eigvalsh(out)
    assert eig.min() > -1e-9 and eig.max() < 1 + 1e-9
    assert abs(np.trace(out) - 1.0) < 1e-9


def test_deflated_projection_avoids_removed_direction():
    pi = np.zeros((3, 3))
    pi[0, 0] = 1.0
    out = project_deflated_fantope(np.diag([2.0, 1.0, 0.0]), pi)
    np.testing.assert_allclose(out, np.diag([0.0, 1.0, 0.0]), atol=1e-10)
    assert abs((out * pi).sum()) < 1e-10


def test_deflation_everything_is_infeasible():
    with pytest.raises(InfeasibleDeflation):
        project_deflated_fantope(np.eye(3), np.eye(3))


def test_projection_rejects_bad_pi():
    pi = np.full((3, 3), 0.5)
    with pytest.raises(ValueError):
        project_deflated_fantope(np.eye(3), pi)


def test_admm_matches_eigendecomposition():
    kmat, q, spectrum = random_psd(20, seed=0)
    state = admm_solve(kmat)
    assert state.converged
    top = leading_sparse_eigenvector(state.A)
    assert abs(top @ q[:, 0]) > 0.999


def test_admm_huge_lambda_collapses_support():
    # consensus forces A = H (trace one) at convergence, so an extreme
    # entrywise penalty drives everything off a single diagonal entry to
    # exact zero rather than killing A outright
    kmat, _, _ = random_psd(12, seed=1)
    lam = np.abs(kmat).max() * 12
    state = admm_solve(kmat, lam=lam, max_iter=500)
    off_diag = state.A[~np.eye(12, dtype=bool)]
    assert np.all(off_diag == 0.0)
    assert np.count_nonzero(state.A) <= 2
    assert abs(np.trace(state.H) - 1.0) < 1e-8


def test_admm_iterates_stay_feasible():
    kmat, q, _ = random_psd(10, seed=2)
    pi = np.outer(q[:, 0], q[:, 0])
    seen = []

    def check(iteration, h, a, c):
        eig = np.linalg.eigvalsh(h)
        seen.append(
            (eig.min(), eig.max(), np.trace(h), float((h * pi).sum()))
        )

    admm_solve(kmat, gamma=0.1, alpha=0.05, lam=0.05, n_variates=2, Pi=pi,
               callback=check, max_iter=100)
    assert seen
    for lo, hi, tr, overlap in seen:
        assert lo > -1e-8 and hi < 1 + 1e-8
        assert abs(tr - 1.0) <= 1e-8
        assert abs(overlap) <= 1e-8


def test_admm_not_converged_warns():
    kmat, _, _ = random_psd(8, seed=3)
    with pytest.warns(NotConvergedWarning):
        state = admm_solve(kmat, max_iter=1, omega=1e-14)
    assert not state.converged
    assert state.iterations == 1


def test_extract_two_planted_spikes():
    rng = np.random.default_rng(4)
    u = np.zeros(12); u[:3] = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    v = np.zeros(12); v[6:9] = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    kmat = 3.0 * np.outer(u, u) + 1.5 * np.outer(v, v) + 0.01 * np.eye(12)
    comps = extract_components(kmat, 0.0, [(0, 0), (0, 0)], 2, n_variates=1)
    assert abs(comps[0].phi @ u) > 0.999
    assert abs(comps[1].phi @ v) > 0.999
    assert abs(comps[0].phi @ comps[1].phi) <= 1e-6


def test_extract_rank_one_equals_admm():
    kmat, _, _ = random_psd(10, seed=5)
    comps = extract_components(kmat, 0.0, [(0.0, 0.0)], 1, n_variates=1)
    state = admm_solve(kmat)
    direct = leading_sparse_eigenvector(state.A)
    np.testing.assert_allclose(np.abs(comps[0].phi), np.abs(direct), atol=1e-9)


def test_extract_no_penalty_matches_top_eigenvectors():
    kmat, q, _ = random_psd(16, seed=6, spectrum=np.linspace(4.0, 0.2, 16))
    comps = extract_components(kmat, 0.0, [(0, 0)] * 3, 3, n_variates=1)
    for rank, comp in enumerate(comps):
        assert abs(comp.phi @ q[:, rank]) > 0.999
    for a in range(3):
        for b in range(a + 1, 3):
            assert abs(comps[a].phi @ comps[b].phi) <= 1e-6


def test_extract_exact_sparsity():
    # plant a sparse spike strong enough to survive entrywise shrinkage
    u = np.zeros(10); u[2:5] = [0.8, 1.0, 0.6]
    u /= np.linalg.norm(u)
    kmat = 5.0 * np.outer(u, u) + 0.05 * np.eye(10)
    comps = extract_components(kmat, 0.0, [(0.0, 0.4)], 1, n_variates=1)
    phi = comps[0].phi
    outside = np.setdiff1d(np.arange(10), [2, 3, 4])
    assert np.all(phi[outside] == 0.0)
    assert np.all(phi[2:5] != 0.0)
    np.testing.assert_array_equal(comps[0].support, phi != 0.0)


def test_sign_convention():
    kmat = np.diag([3.0, 1.0])
    comps = extract_components(kmat, 0.0, [(0, 0)], 1, n_variates=1)
    assert comps[0].phi[0] > 0  # largest-magnitude entry made positive


def test_component_unit_norm():
    kmat, _, _ = random_psd(9, seed=7)
    comps = extract_components(kmat, 0.0, [(0, 0)] * 2, 2, n_variates=1)
    for comp in comps:
        assert abs(np.linalg.norm(comp.phi) - 1.0) < 1e-10
