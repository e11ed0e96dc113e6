import numpy as np
import pytest

from mcti.classifier import (
    TextClassifier,
    build_text_classifier,
    classify,
    cluster_ratio,
    evaluate_accuracy,
    fit_pca,
    generation_similarity,
    predict,
    predict_proba,
    project_text_features,
)
from mcti.core import T1, PromptLibrary
from mcti.errors import EmptyTestSetError, MissingTokenError, SamplingUnsupportedError, ZeroNormError
from mcti.trainer import train_concepts


@pytest.fixture
def trained(small_split, fast_config):
    be, ds, cache = small_split
    results, _ = train_concepts(ds, cache, fast_config, be)
    return be, ds, cache, {k: r.token for k, r in results.items()}


def toy_clf():
    return TextClassifier(np.eye(3), T1)


def test_text_classifier_validation():
    with pytest.raises(ValueError):
        TextClassifier(np.ones((2, 3)), T1)
    with pytest.raises(ValueError):
        TextClassifier(np.array([[np.nan, 0, 0]]), T1)


def test_classify_argmax_and_ties():
    clf = toy_clf()
    r = classify(clf, np.array([0.1, 0.9, 0.2]), true_label=2)
    assert r.predicted == 2 and r.correct and abs(r.probs.sum() - 1) < 1e-12
    assert classify(clf, np.array([1.0, 1.0, 0.0])).predicted == 1
    assert list(predict(clf, np.array([[0, 1.0, 1.0], [0, 0, 2.0]]))) == [2, 3]
    with pytest.raises(ZeroNormError):
        predict(clf, np.zeros((1, 3)))


def test_predict_proba_rows_sum_to_one():
    P = predict_proba(toy_clf(), np.random.default_rng(0).standard_normal((5, 3)))
    assert P.shape == (5, 3) and np.allclose(P.sum(axis=1), 1)


def test_evaluate_accuracy_per_class():
    clf = toy_clf()
    test = [(np.array([1.0, 0, 0]), 1), (np.array([0, 1.0, 0]), 1), (np.array([0, 0, 1.0]), 3)]
    acc, per = evaluate_accuracy(clf, test, per_class=True)
    assert acc == pytest.approx(2 / 3)
    assert per[1] == 0.5 and per[3] == 1.0 and np.isnan(per[2])
    with pytest.raises(EmptyTestSetError):
        evaluate_accuracy(clf, [])


def test_build_from_tokens(trained):
    be, ds, cache, tokens = trained
    clf = build_text_classifier(tokens, T1, backend=be)
    assert clf.class_features.shape == (3, 32)
    with pytest.raises(MissingTokenError):
        build_text_classifier({1: tokens[1], 3: tokens[3]}, T1, backend=be, K=3)


def test_generation_similarity(trained):
    be, ds, cache, tokens = trained
    sims = generation_similarity(tokens, be, cache, n_samples=3)
    assert set(sims) == {1, 2, 3} and all(-1 <= v <= 1 for v in sims.values())
    assert sims == generation_similarity(tokens, be, cache, n_samples=3)


def test_generation_needs_sampling(trained):
    from classify_only_backend import ClassifyOnlyBackend

    _, _, cache, tokens = trained
    with pytest.raises(SamplingUnsupportedError):
        generation_similarity(tokens, ClassifyOnlyBackend(), cache)


def test_projection(trained):
    be, _, _, tokens = trained
    templates = PromptLibrary.default().visualization_templates
    proj = project_text_features(tokens, templates, be)
    rows = list(proj.rows())
    assert len(rows) == 27 * 3 and rows[0][:2] == (1, templates[0].template_id)
    assert 0 < proj.explained_variance_ratio.sum() <= 1 + 1e-9
    assert cluster_ratio(proj) > 0


def test_pca_full_rank_reconstructs():
    X = np.random.default_rng(0).standard_normal((10, 4))
    Y, pca, ratio = fit_pca(X, dims=4)
    assert np.allclose(pca.inverse_transform(Y), X)
    assert ratio.sum() == pytest.approx(1.0)


def test_pca_degenerate_inputs():
    with pytest.warns(RuntimeWarning):
        Y, _, ratio = fit_pca(np.ones((5, 3)))
    assert np.all(Y == 0) and np.all(ratio == 0)
    X = np.outer(np.arange(6.0), [1.0, 2.0, 0.0])
    with pytest.warns(RuntimeWarning):
        Y, _, ratio = fit_pca(X)
    assert np.all(Y[:, 1] == 0) and ratio[0] == pytest.approx(1.0)
