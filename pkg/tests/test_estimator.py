import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from locfpca.dataset import demean_by_replicate
from locfpca.estimator import LocalizedMultilevelFPCA
from locfpca.simulate import SimulationConfig, generate_dataset


@pytest.fixture(scope="module")
def small_fit():
    cfg = SimulationConfig(
        n_subjects=40, n_replicates=5, n_variates=3, n_points=24, seed=2
    )
    ds, truth = generate_dataset(cfg)
    model = LocalizedMultilevelFPCA(
        gamma=0.0, alpha=0.05, lam=0.05, n_components=(2, 2), random_state=0
    )
    model.fit(ds.values)
    return model, ds, truth


def test_get_set_params_round_trip():
    model = LocalizedMultilevelFPCA(delta=0.25, max_iter=500)
    params = model.get_params()
    assert params["delta"] == 0.25
    assert params["max_iter"] == 500
    cloned = clone(model)
    assert cloned.get_params() == params


def test_unfitted_transform_raises():
    model = LocalizedMultilevelFPCA()
    with pytest.raises(NotFittedError):
        model.transform(np.zeros((3, 2, 1, 5)))


def test_fit_exposes_attributes(small_fit):
    model, ds, _ = small_fit
    mp = ds.n_variates * ds.n_points
    assert model.rho_.shape == (5, 5)
    assert model.cov_z_.shape == (mp, mp)
    assert len(model.components_z_) == 2
    assert len(model.components_w_) == 2
    assert model.scores_z_.shape == (40, 2)
    assert model.scores_w_.shape == (40, 5, 2)
    assert model.eigenfunctions_z_.shape == (2, mp)
    np.testing.assert_allclose(
        np.linalg.norm(model.eigenfunctions_z_, axis=1),
        np.sqrt(ds.n_points),
        atol=1e-8,
    )
    assert np.all(model.eigenvalues_z_ >= 0)
    assert model.sigma2_ >= 0


def test_eigenvalues_close_to_truth(small_fit):
    model, _, truth = small_fit
    # leading subject-level variance should be near the planted value
    assert model.eigenvalues_z_[0] == pytest.approx(1.0, abs=0.5)


def test_eigenvalues_nonnegative_and_ordered(small_fit):
    model, _, _ = small_fit
    for values in (model.eigenvalues_z_, model.eigenvalues_w_):
        assert np.all(values >= 0)
        assert np.all(np.diff(values) <= 1e-8)


def test_scores_are_centered(small_fit):
    # demeaned data gives predicted scores with near-zero column means
    model, ds, _ = small_fit
    n = ds.n_subjects
    assert np.abs(model.scores_z_.mean(axis=0)).max() <= 5.0 / np.sqrt(n)
    assert np.abs(model.scores_w_.mean(axis=(0, 1))).max() <= 5.0 / np.sqrt(n)


def test_transform_matches_training_scores(small_fit):
    model, ds, _ = small_fit
    out = model.transform(ds.values)
    n = ds.n_subjects
    np.testing.assert_allclose(out[:, :2], model.scores_z_, atol=1e-8)
    np.testing.assert_allclose(
        out[:, 2:], model.scores_w_.reshape(n, -1), atol=1e-8
    )


def test_transform_validates_dims(small_fit):
    model, _, _ = small_fit
    with pytest.raises(ValueError):
        model.transform(np.zeros((3, 4, 3, 24)))


def test_accepts_demeaned_dataset():
    cfg = SimulationConfig(
        n_subjects=30, n_replicates=5, n_variates=3, n_points=16, seed=5
    )
    ds, _ = generate_dataset(cfg)
    model = LocalizedMultilevelFPCA(
        gamma=0.0, alpha=0.0, lam=0.0, n_components=(1, 1)
    )
    model.fit(demean_by_replicate(ds))
    assert np.all(model.means_ == 0.0)


def test_fve_component_selection():
    cfg = SimulationConfig(
        n_subjects=40, n_replicates=5, n_variates=3, n_points=16,
        sigma2=0.2, seed=6,
    )
    ds, _ = generate_dataset(cfg)
    model = LocalizedMultilevelFPCA(
        gamma=0.0, alpha=0.0, lam=0.0, n_components=None,
        fve_threshold=0.5, max_components=6,
    )
    model.fit(ds)
    assert 1 <= len(model.components_z_) <= 6
    assert model.fve_z_.sum() >= 0.5 or len(model.components_z_) == 6


def test_rfve_mode_records_retention():
    cfg = SimulationConfig(
        n_subjects=40, n_replicates=5, n_variates=3, n_points=16, seed=7
    )
    ds, _ = generate_dataset(cfg)
    model = LocalizedMultilevelFPCA(
        gamma=0.0, tuning_mode="rfve", rfve_floor=0.6, n_components=(1, 1)
    )
    model.fit(ds)
    assert model.rfve_z_[0] is None or model.rfve_z_[0] >= 0.6


def test_rejects_bad_input_shape():
    model = LocalizedMultilevelFPCA()
    with pytest.raises(ValueError):
        model.fit(np.zeros((4, 5)))
