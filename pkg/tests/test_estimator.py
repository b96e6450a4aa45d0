import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from advseg.data import SynthConfig, synth_generate
from advseg.estimator import AdversarialSegmenter, check_images, check_labels


@pytest.fixture(scope="module")
def frames():
    cfg = SynthConfig(height=80, width=72, min_cells=2, max_cells=3)
    samples = [synth_generate(cfg, s) for s in (4, 5)]
    return [s.image for s in samples], [s.label for s in samples]


def test_params_round_trip_and_clone():
    seg = AdversarialSegmenter(n_steps=7, lr_d=3e-4, random_state=9)
    params = seg.get_params()
    assert params["n_steps"] == 7 and params["lr_d"] == 3e-4 and params["random_state"] == 9
    twin = clone(seg)
    assert twin.get_params() == params and twin is not seg
    seg.set_params(mode="cross_entropy")
    assert seg.mode == "cross_entropy"


def test_unfitted_predict_raises(frames):
    with pytest.raises(NotFittedError):
        AdversarialSegmenter().predict(frames[0])


def test_fit_predict_score(frames):
    X, y = frames
    seg = AdversarialSegmenter(n_steps=2, random_state=1).fit(X, y)
    assert len(seg.history_) == 2 and seg.state_.config.n_train == 2
    probs = seg.predict_proba(X)
    assert probs[0].shape == (80, 72, 3)
    np.testing.assert_allclose(probs[0].sum(-1), 1.0, atol=1e-9)
    labels = seg.predict(X)
    assert labels[1].dtype == np.uint8 and labels[1].shape == (80, 72)
    assert 0.0 <= seg.score(X, y) <= 1.0


def test_fit_is_reproducible(frames):
    X, y = frames
    a = AdversarialSegmenter(n_steps=2, mode="cross_entropy", random_state=4).fit(X, y)
    b = AdversarialSegmenter(n_steps=2, mode="cross_entropy", random_state=4).fit(X, y)
    assert a.history_ == b.history_
    np.testing.assert_array_equal(a.predict_proba(X[:1])[0], b.predict_proba(X[:1])[0])


def test_from_state_keeps_settings(frames):
    X, y = frames
    seg = AdversarialSegmenter(n_steps=1, mode="cross_entropy", lr_e=5e-4, random_state=2).fit(X, y)
    back = AdversarialSegmenter.from_state(seg.state_)
    assert back.get_params() == seg.get_params()


def test_check_images():
    with pytest.raises(ValueError, match="wrap a single image"):
        check_images(np.zeros((20, 20)))
    with pytest.raises(ValueError, match="no images"):
        check_images([])
    with pytest.raises(ValueError, match="at least 9x9"):
        check_images([np.zeros((8, 30))])
    with pytest.raises(ValueError, match="2-D"):
        check_images([np.zeros((20, 20, 3))])
    with pytest.raises(ValueError, match="NaN"):
        check_images([np.full((20, 20), np.nan)])
    assert len(check_images(np.zeros((3, 12, 12)))) == 3


def test_check_labels():
    images = [np.zeros((10, 10))]
    with pytest.raises(ValueError, match="1 images but 2"):
        check_labels([np.zeros((10, 10))] * 2, images)
    with pytest.raises(ValueError, match="shape"):
        check_labels([np.zeros((10, 11))], images)
    with pytest.raises(ValueError, match="outside"):
        check_labels([np.full((10, 10), 3)], images)
    with pytest.raises(ValueError, match="integer"):
        check_labels([np.full((10, 10), 0.5)], images)
    assert check_labels([np.ones((10, 10))], images)[0].dtype == np.uint8


def test_fit_rejects_frames_smaller_than_crop():
    with pytest.raises(ValueError, match="64x64"):
        AdversarialSegmenter(n_steps=1).fit([np.zeros((40, 40))], [np.zeros((40, 40), dtype=int)])
