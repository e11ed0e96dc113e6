import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcti.classifier import TextClassifier, predict
from mcti.core import T1
from mcti.losses import PrototypeSet, discriminative_regularizer, predict_probabilities

finite = st.floats(-10, 10, allow_nan=False, allow_subnormal=False)


@st.composite
def problems(draw):
    K = draw(st.integers(2, 6))
    D = draw(st.integers(2, 8))
    g = draw(arrays(np.float64, D, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
    F = draw(arrays(np.float64, (K, D), elements=finite).filter(
        lambda m: np.all(np.linalg.norm(m, axis=1) > 1e-3)))
    return g, F


@settings(max_examples=200, deadline=None)
@given(problems(), st.floats(0.1, 100))
def test_probabilities_form_a_distribution(prob, s):
    g, F = prob
    p = predict_probabilities(g, F, s).numpy()
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


@settings(max_examples=200, deadline=None)
@given(problems(), st.floats(0.1, 100), st.floats(0.01, 100))
def test_invariant_to_positive_rescaling(prob, s, c):
    g, F = prob
    assert np.allclose(predict_probabilities(g, F, s), predict_probabilities(c * g, F, s), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(problems(), st.floats(0.1, 50))
def test_regularizer_nonnegative_and_bounded_below_by_argmax(prob, s):
    g, F = prob
    K = F.shape[0]
    losses = [float(discriminative_regularizer(g, PrototypeSet(F, k), s)) for k in range(1, K + 1)]
    assert min(losses) >= -1e-12
    assert abs(sum(np.exp(-np.array(losses))) - 1) < 1e-9


@settings(max_examples=100, deadline=None)
@given(problems(), st.floats(0.01, 100))
def test_prediction_ignores_feature_scale(prob, c):
    g, F = prob
    clf = TextClassifier(F / np.linalg.norm(F, axis=1, keepdims=True), T1)
    assert predict(clf, g[None]) == predict(clf, c * g[None])
