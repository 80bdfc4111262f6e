import numpy as np
import pytest

from wxsplat import weathergen as wg
from wxsplat.estimator import NotFittedError, SplatReconstructor


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("est") / "ds"
    scene = wg.build_scene(wg.SceneSpec(seed=4, resolution=32, cam_count=3))
    wg.compose_dataset(scene, wg.WeatherSpec(kinds="H", seed=2), root)
    return wg.load_dataset(root)


TINY = dict(m_init=5, m_joint=5, z_ref=5, k_samples=8, grid_resolution=8, init_points=40, seed=1)


def test_get_set_params_roundtrip():
    est = SplatReconstructor(m_init=77, lambda_r=0.3)
    params = est.get_params()
    assert params["m_init"] == 77
    assert params["lambda_r"] == 0.3
    clone = SplatReconstructor(**params)
    assert clone.get_params() == params
    est.set_params(m_joint=11)
    assert est.m_joint == 11
    with pytest.raises(ValueError):
        est.set_params(banana=1)


def test_predict_before_fit_raises(dataset):
    with pytest.raises(NotFittedError):
        SplatReconstructor().predict(dataset)


def test_fit_predict_score(dataset):
    est = SplatReconstructor(**TINY)
    out = est.fit(dataset)
    assert out is est
    assert est.n_iter_ == 10
    assert hasattr(est, "model_") and hasattr(est, "log_")
    renders = est.predict(dataset)
    assert len(renders) == 3
    assert renders[0].shape == dataset.views[0].image.shape
    score = est.score(dataset, dataset.clean)
    assert np.isfinite(score) and score > 0


def test_fit_accepts_paths_and_views(dataset):
    est = SplatReconstructor(**TINY)
    est.fit(str(dataset.root))
    renders = est.predict([v.cam for v in dataset.views])
    assert len(renders) == 3
    with pytest.raises(ValueError):
        est.fit([1, 2, 3])


def test_params_flow_into_training(dataset):
    est = SplatReconstructor(**dict(TINY, csm_enabled=False))
    est.fit(dataset)
    assert est.model_.grid is None


def test_score_length_mismatch(dataset):
    est = SplatReconstructor(**TINY).fit(dataset)
    with pytest.raises(ValueError):
        est.score(dataset, dataset.clean[:2])
