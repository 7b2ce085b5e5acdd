import numpy as np
import pytest
from sklearn.base import clone

from hvcnet import DimensionError, HVCNetClassifier, MnistAugmenter
from hvcnet.validation import check_images, check_labels


def test_check_images_accepts_three_layouts():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (3, 28, 28), dtype=np.uint8)
    for X in (img, img.reshape(3, 784), img[..., None], img.astype(np.int64)):
        assert np.array_equal(check_images(X), img)
    assert np.array_equal(check_images(img / 255.0), img)


def test_check_images_rejects_bad_input():
    with pytest.raises(DimensionError, match=r"\(3, 27, 28\)"):
        check_images(np.zeros((3, 27, 28)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_images(np.full((1, 784), 1.5))
    with pytest.raises(ValueError, match="255"):
        check_images(np.full((1, 784), 300))
    with pytest.raises(ValueError):
        check_images(np.full((1, 784), np.nan))


def test_check_labels():
    assert check_labels([0, 9, 3.0], 3).tolist() == [0, 9, 3]
    with pytest.raises(ValueError, match="sample 1"):
        check_labels([0, 10, 3], 3)
    with pytest.raises(ValueError, match="2 labels for 3"):
        check_labels([0, 1], 3)
    with pytest.raises(ValueError, match="integer"):
        check_labels([0.5, 1, 2], 3)


def test_params_and_clone():
    est = HVCNetClassifier(head="fc", branches=1, epochs=2, seed=7)
    params = est.get_params()
    assert params["head"] == "fc" and params["epochs"] == 2 and params["merge"] is None
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    aug = clone(MnistAugmenter(strategy="translate-2px", seed=3))
    assert aug.get_params()["strategy"] == "translate-2px"


def test_augmenter_none_is_identity(proxy_data):
    X = proxy_data[0].images[:20]
    assert np.array_equal(MnistAugmenter(strategy="none").fit_transform(X), X)


def test_augmenter_is_deterministic_and_offset_consistent(proxy_data):
    X = proxy_data[0].images[:30]
    a = MnistAugmenter(seed=4, epoch=2).transform(X)
    b = MnistAugmenter(seed=4, epoch=2, threads=3).transform(X)
    assert np.array_equal(a, b)
    tail = MnistAugmenter(seed=4, epoch=2, offset=10).transform(X[10:])
    assert np.array_equal(tail, a[10:])
    other = MnistAugmenter(seed=4, epoch=3).transform(X)
    assert not np.array_equal(a, other)


def test_augmenter_rejects_unknown_strategy(proxy_data):
    from hvcnet import ConfigError

    with pytest.raises(ConfigError):
        MnistAugmenter(strategy="warp").transform(proxy_data[0].images[:2])


def test_predict_before_fit_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        HVCNetClassifier().predict(np.zeros((1, 784), np.uint8))


@pytest.mark.slow
def test_classifier_fit_predict(proxy_data):
    train, test = proxy_data
    est = HVCNetClassifier(branches=1, epochs=1, batch_size=20, augment="none", seed=1)
    est.fit(train.images[:40], train.labels[:40], eval_set=(test.images[:20], test.labels[:20]))
    assert len(est.history_) == 1
    proba = est.predict_proba(test.images[:20])
    assert proba.shape == (20, 10)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    pred = est.predict(test.images[:20].reshape(20, 784))
    assert np.array_equal(pred, proba.argmax(axis=1))
    assert np.array_equal(est.predict(test.images[:20]), pred)
    assert est.branch_weights_ is None
    assert 0.0 <= est.score(test.images[:20], test.labels[:20]) <= 1.0
