import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from seda.estimators import OneStepAlignClassifier, SedaClassifier, VisualLinearClassifier

FAST = dict(epochs=3, learning_rate=3e-3, batch_size=32)


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(3, 8)) * 3
    y = np.repeat(np.array(["cat", "dog", "eel"]), 30)
    idx = np.repeat(np.arange(3), 30)
    text = protos[idx] + 0.3 * rng.normal(size=(90, 8))
    vis = 0.5 * protos[idx] + rng.normal(size=(90, 8))
    return vis, y, text


def test_params_round_trip_and_clone():
    est = SedaClassifier(total_steps=30, staged_step=5, token_count=2)
    params = est.get_params()
    assert params["total_steps"] == 30 and params["token_count"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(gamma=1.0).gamma == 1.0


def test_seda_classifier_fit_predict(toy):
    vis, y, text = toy
    est = SedaClassifier(total_steps=20, beta_start=5e-3, beta_end=0.5, staged_step=5, token_count=2, **FAST)
    with pytest.raises(NotFittedError):
        est.predict(vis)
    est.fit(vis, y, text_features=text)
    assert list(est.classes_) == ["cat", "dog", "eel"]
    assert est.n_features_in_ == 8 and len(est.history_) == 3
    proba = est.predict_proba(vis)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert set(est.predict(vis)) <= set(est.classes_)
    assert est.transform(vis).shape == (90, 8)
    # sampling is seeded from random_state, so repeated calls agree
    np.testing.assert_array_equal(est.predict_proba(vis), proba)
    assert 0 <= est.score(vis, y) <= 1


def test_text_features_required(toy):
    vis, y, text = toy
    with pytest.raises(ValueError):
        SedaClassifier(**FAST).fit(vis, y)
    with pytest.raises(ValueError):
        OneStepAlignClassifier(**FAST).fit(vis, y, text_features=text[:, :4])
    with pytest.raises(ValueError):
        SedaClassifier(use_dst=False, use_dsl=False).fit(vis, y, text_features=text)


def test_baseline_estimators(toy):
    vis, y, text = toy
    onestep = OneStepAlignClassifier(**FAST).fit(vis, y, text_features=text)
    assert onestep.score(vis, y) > 1 / 3
    visual = VisualLinearClassifier(epochs=20, learning_rate=1e-2).fit(vis, y)
    np.testing.assert_array_equal(visual.transform(vis), vis.astype(np.float32))
    assert visual.score(vis, y) > 0.8


def test_pipeline_compatibility(toy):
    vis, y, text = toy
    pipe = make_pipeline(StandardScaler(), VisualLinearClassifier(epochs=5, learning_rate=1e-2))
    assert pipe.fit(vis, y).predict(vis).shape == (90,)


def test_multi_label_indicator(toy):
    vis, _, text = toy
    rng = np.random.default_rng(1)
    Y = (rng.random((90, 4)) < 0.4).astype(int)
    Y[np.arange(90), rng.integers(0, 4, 90)] = 1
    est = OneStepAlignClassifier(epochs=1).fit(vis, Y, text_features=text)
    assert est.label_mode_ == "multi"
    pred = est.predict(vis)
    assert pred.shape == (90, 4) and set(np.unique(pred)) <= {0, 1}


def test_input_validation(toy):
    vis, y, text = toy
    with pytest.raises(ValueError):
        VisualLinearClassifier().fit(vis[:10], y)
    bad = vis.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        VisualLinearClassifier().fit(bad, y)
    with pytest.raises(ValueError):
        VisualLinearClassifier().fit(vis, np.zeros(90))
