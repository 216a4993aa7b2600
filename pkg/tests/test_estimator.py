import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flowsplat import FlowSplatSR
from flowsplat import imaging


def test_get_set_params_roundtrip():
    est = FlowSplatSR(scale=3.0, nfe=2, seed=5)
    params = est.get_params()
    assert params["scale"] == 3.0
    assert params["nfe"] == 2
    est.set_params(scale=2.0)
    assert est.scale == 2.0


def test_clone_preserves_params():
    est = FlowSplatSR(scale=2.5, stage1_steps=12, stage2_steps=12, seed=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()


def test_transform_before_fit_raises():
    est = FlowSplatSR()
    with pytest.raises(NotFittedError):
        est.transform([np.zeros((8, 8, 3), np.float32)])


def test_fit_validates_inputs():
    est = FlowSplatSR(stage1_steps=2, stage2_steps=2)
    with pytest.raises(ValueError, match="at least 3"):
        est.fit([np.zeros((32, 32, 3), np.float32)])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        est.fit([np.full((32, 32, 3), 2.0, np.float32)] * 4)
    with pytest.raises(ValueError, match="share one shape"):
        est.fit([np.zeros((32, 32, 3), np.float32), np.zeros((16, 16, 3), np.float32),
                 np.zeros((32, 32, 3), np.float32)])


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    images = imaging.synth_dataset(33, 6, 32)
    est = FlowSplatSR(scale=2.0, nfe=1, stage1_steps=10, stage2_steps=10, seed=0,
                      work_dir=str(tmp_path_factory.mktemp("est_run")))
    return est.fit(images), images


def test_fit_produces_model_and_report(fitted):
    est, _ = fitted
    assert hasattr(est, "model_")
    assert est.report_["stage1"]["steps"] == 10
    assert est.report_["stage2"]["steps"] == 10


def test_transform_upscales_by_factor(fitted):
    est, _ = fitted
    lrs = [np.random.default_rng(1).uniform(0, 1, (12, 10, 3)).astype(np.float32)]
    outs = est.transform(lrs)
    assert len(outs) == 1
    assert outs[0].shape == (24, 20, 3)
    assert outs[0].min() >= 0.0 and outs[0].max() <= 1.0


def test_predict_is_transform(fitted):
    est, _ = fitted
    lr = [np.random.default_rng(2).uniform(0, 1, (10, 10, 3)).astype(np.float32)]
    a = est.predict(lr)
    b = est.transform(lr)
    assert np.array_equal(a[0], b[0])


def test_upscale_overrides(fitted):
    est, _ = fitted
    lr = np.random.default_rng(3).uniform(0, 1, (10, 10, 3)).astype(np.float32)
    out = est.upscale(lr, scale=3.0, nfe=2, seed=7)
    assert out.shape == (30, 30, 3)


def test_transform_channel_mismatch_rejected(fitted):
    est, _ = fitted
    with pytest.raises(ValueError, match="channels"):
        est.transform([np.zeros((10, 10, 1), np.float32)])
