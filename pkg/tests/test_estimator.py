import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from yoga.estimator import YogaDetector, check_images, check_targets
from yoga.train import gen_toy_dataset


def test_params_round_trip():
    est = YogaDetector(epochs=3, seed=4)
    params = est.get_params()
    assert params["epochs"] == 3 and params["seed"] == 4 and params["profile"] == "micro"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(num_classes=2)
    assert est.num_classes == 2


@pytest.mark.parametrize("bad", [np.zeros((2, 64, 64)), np.zeros((2, 64, 64, 4)),
                                 np.zeros((1, 48, 48, 3)), np.zeros((1, 64, 32, 3)),
                                 np.full((1, 64, 64, 3), 300.0), np.zeros((0, 64, 64, 3))])
def test_check_images_rejects(bad):
    with pytest.raises(ValueError):
        check_images(bad)


def test_check_images_converts_float():
    out = check_images(np.full((1, 32, 32, 3), 10.4))
    assert out.dtype == np.uint8 and out[0, 0, 0, 0] == 10


@pytest.mark.parametrize("rows", [[[3, 10, 10, 4, 4]], [[0.5, 10, 10, 4, 4]],
                                  [[0, 10, 10, 0, 4]], [[0, 70, 10, 4, 4]]])
def test_check_targets_rejects(rows):
    with pytest.raises(ValueError):
        check_targets([np.array(rows)], 1, 3, 64)


def test_check_targets_count():
    with pytest.raises(ValueError):
        check_targets([], 1, 3, 64)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        YogaDetector().predict(np.zeros((1, 64, 64, 3), np.uint8))


def test_small_fit_predict_score():
    d = gen_toy_dataset(10, seed=11)
    est = YogaDetector(epochs=2, batch_size=5, seed=0).fit(d.images[:8], d.labels[:8],
                                                          eval_set=(d.images[8:], d.labels[8:]))
    assert len(est.report_.epochs) == 2 and est.image_size_ == 64
    preds = est.predict(d.images[8:], conf_threshold=0.0)
    assert len(preds) == 2
    s = est.score(d.images[8:], d.labels[8:])
    assert 0.0 <= s <= 1.0
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 32, 32, 3), np.uint8))
