import numpy as np
import pytest
from sklearn.base import clone

from dosegan import DoseEstimator
from dosegan.estimator import arrays_to_dataset


def _arrays(ds):
    pairs = ds.pairs("train") + ds.pairs("val")
    X = np.stack([p.x for p in pairs])
    y = np.stack([p.y_s for p in pairs])
    return X, y, np.array([p.drf_value for p in pairs])


def test_arrays_to_dataset_split(tiny_dataset):
    X, y, drf = _arrays(tiny_dataset)
    ds = arrays_to_dataset(X, y, drf, val_fraction=0.25, seed=1)
    assert len(ds.pairs("val")) == 8 and len(ds.pairs("train")) == 22
    with pytest.raises(ValueError):
        arrays_to_dataset(X, y, drf[:-1])
    with pytest.raises(ValueError):
        arrays_to_dataset(X, y, np.full(len(X), 7))
    with pytest.raises(ValueError):
        arrays_to_dataset(X[..., :5], y[..., :5], drf)


def test_fit_predict_score(tiny_dataset):
    X, y, drf = _arrays(tiny_dataset)
    X, y, drf = X[::3], y[::3], drf[::3]
    est = DoseEstimator(base_channels=2, refiner_channels=2, max_epochs=1, batch_size=4)
    est.fit(X, y, drf=drf)
    pred = est.predict(X[:3])
    assert pred.shape == (3, 32, 32, 32) and np.isfinite(pred).all()
    assert set(est.predict_drf(X[:3])) <= {4, 10, 20, 50, 100}
    assert np.isfinite(est.score(X[:3], y[:3]))
    assert len(est.history_) == 1
    assert clone(est).get_params() == est.get_params()


def test_drf_required_unless_baseline(tiny_dataset):
    X, y, _ = _arrays(tiny_dataset)
    with pytest.raises(ValueError, match="drf"):
        DoseEstimator(max_epochs=1).fit(X[:4], y[:4])


def test_predict_before_fit_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        DoseEstimator().predict(np.zeros((1, 32, 32, 32)))
