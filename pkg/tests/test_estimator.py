import numpy as np
import pytest
from sklearn.base import clone

from glam.estimator import GLAMSegmenter
from glam.exceptions import NotFittedError, ValidationError

TINY = dict(base_channels=4, depth=2, decoder_channels=4, head_channels=4, epochs=3, learning_rate=1e-2, leftover="carry")


def _data(n=8, size=16, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, size, size, 3)).astype(np.float32)
    y = np.zeros((n, size, size), np.uint8)
    y[:, 4:12, 4:12] = 1
    return X, y, np.array([1, 2] * (n // 2))


def test_get_params_and_clone():
    est = GLAMSegmenter(**TINY)
    params = est.get_params()
    assert params["depth"] == 2 and params["emit_rule"] == "exceeds"
    twin = clone(est.set_params(random_state=5))
    assert twin.get_params()["random_state"] == 5 and not hasattr(twin, "model_")


def test_fit_predict_score():
    X, y, c = _data()
    est = GLAMSegmenter(**TINY).fit(X, y, class_ids=c, validation_data=(X[:2], y[:2], c[:2]))
    assert len(est.history_) == 3 and "val" in est.history_.val_sets
    pred = est.predict(X, c)
    assert pred.shape == y.shape and pred.dtype == np.uint8
    assert est.predict(X[0], 1).shape == (16, 16)
    assert 0.0 <= est.score(X, y, c) <= 1.0
    res = est.validation_dice(X, y, c)
    assert set(res.per_class) == {1, 2}


def test_fit_is_seeded():
    X, y, c = _data()
    a = GLAMSegmenter(**TINY).fit(X, y, class_ids=c).predict_proba(X, c)
    b = GLAMSegmenter(**TINY).fit(X, y, class_ids=c).predict_proba(X, c)
    assert np.array_equal(a, b)


def test_input_validation():
    X, y, c = _data()
    est = GLAMSegmenter(**TINY)
    with pytest.raises(NotFittedError):
        est.predict(X, c)
    with pytest.raises(ValidationError):
        est.fit(X, y)
    with pytest.raises(ValidationError):
        est.fit(X, y[:, :8], class_ids=c)
    with pytest.raises(ValidationError):
        est.fit(X, y, class_ids=np.full(len(X), 7))
    with pytest.raises(ValidationError):
        est.fit(X * 3, y, class_ids=c)
    with pytest.raises(ValidationError):
        est.fit(X, y, class_ids=c, species="rat")
