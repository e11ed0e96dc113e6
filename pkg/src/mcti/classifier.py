"""Inference with learned concept tokens, plus evaluation utilities.

A :class:`TextClassifier` holds one encoded prompt feature per concept.
An image is assigned to the concept whose feature has the highest cosine,
with the same scaled softmax as the training regularizer (image and text
roles swapped). Ties go to the lowest class index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.decomposition import PCA

from .core import T1, ConceptToken, PromptTemplate
from .errors import EmptyTestSetError, MissingTokenError, ShapeError
from .losses import cosine_logits, predict_probabilities
from .trainer import text_features


def _tokens_of(store) -> Mapping[int, ConceptToken]:
    return store.tokens if hasattr(store, "tokens") else store


@dataclass
class TextClassifier:
    class_features: np.ndarray
    template_used: PromptTemplate
    token_store_version: str = ""
    context: object | None = None
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        F = np.asarray(self.class_features, dtype=np.float64)
        if F.ndim != 2 or F.shape[0] < 1:
            raise ShapeError("class_features must be a nonempty (K, D) matrix")
        if not np.isfinite(F).all():
            raise ValueError("class features contain non-finite values")
        norms = np.linalg.norm(F, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("class feature rows must be unit norm")
        self.class_features = F
        if not self.classes:
            self.classes = tuple(range(1, F.shape[0] + 1))

    @property
    def K(self) -> int:
        return self.class_features.shape[0]


@dataclass
class ClassificationResult:
    probs: np.ndarray
    predicted: int
    true_label: int | None = None

    @property
    def correct(self) -> bool | None:
        return None if self.true_label is None else self.predicted == self.true_label


def build_text_classifier(store, template: PromptTemplate = T1, context=None, *,
                          backend, K: int | None = None) -> TextClassifier:
    """Encode every concept token with ``template`` (or the learned context)."""
    tokens = _tokens_of(store)
    K = K if K is not None else getattr(store, "K", None) or (max(tokens) if tokens else 0)
    missing = set(range(1, K + 1)) - set(tokens)
    if missing or K < 1:
        raise MissingTokenError(missing or {1})
    ctx = getattr(context, "vectors", context)
    with torch.no_grad():
        G = text_features({k: tokens[k] for k in range(1, K + 1)}, backend, template, ctx)
    G = G / G.norm(dim=1, keepdim=True)
    return TextClassifier(
        class_features=G.numpy(),
        template_used=template,
        token_store_version=str(getattr(store, "version", "")),
        context=context,
    )


def classify(clf: TextClassifier, f, s: float = 10.0, true_label: int | None = None) -> ClassificationResult:
    vec = getattr(f, "vector", f)
    probs = predict_probabilities(vec, torch.from_numpy(clf.class_features), s).numpy()
    return ClassificationResult(probs, int(np.argmax(probs)) + 1, true_label)


def predict_proba(clf: TextClassifier, features: np.ndarray, s: float = 10.0) -> np.ndarray:
    """Row-wise probabilities for a ``(n, D)`` feature matrix."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != clf.class_features.shape[1]:
        raise ShapeError(f"expected (n, {clf.class_features.shape[1]}) features, got {X.shape}")
    F = torch.from_numpy(clf.class_features)
    return np.stack([predict_probabilities(torch.from_numpy(x), F, s).numpy() for x in X]) \
        if len(X) else np.zeros((0, clf.K))


def predict(clf: TextClassifier, features: np.ndarray) -> np.ndarray:
    """1-based predictions; argmax of cosine, independent of the scale."""
    X = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        from .errors import ZeroNormError

        raise ZeroNormError("zero-norm image feature")
    return np.argmax((X / norms) @ clf.class_features.T, axis=1) + 1


def evaluate_accuracy(clf: TextClassifier, test_features: Sequence[tuple[object, int]], s: float = 10.0,
                      per_class: bool = False):
    """Fraction of correct predictions; with ``per_class`` also a dict of
    per-class accuracies (``nan`` for classes absent from the test set)."""
    if len(test_features) == 0:
        raise EmptyTestSetError("test set is empty")
    X = np.stack([np.asarray(getattr(f, "vector", f), dtype=np.float64) for f, _ in test_features])
    y = np.array([int(k) for _, k in test_features])
    pred = predict(clf, X)
    acc = float(np.mean(pred == y))
    if not per_class:
        return acc
    per = {}
    for k in range(1, clf.K + 1):
        mask = y == k
        per[k] = float(np.mean(pred[mask] == k)) if mask.any() else float("nan")
    return acc, per


def generation_similarity(store, backend, cache, n_samples: int = 10, template: PromptTemplate = T1,
                          seed: int = 0) -> dict[int, float]:
    """Mean cosine between generated images and each class's training features.

    For every class, ``n_samples`` images are generated from ``template``
    with that class's token; the score averages the cosine over all
    (generated, training) pairs.
    """
    tokens = _tokens_of(store)
    if not getattr(backend, "supports_sampling", False):
        from .errors import SamplingUnsupportedError

        raise SamplingUnsupportedError(f"sampling-unsupported: backend {backend.descriptor.name!r}")
    with torch.no_grad():
        G = text_features(tokens, backend, template)
    out = {}
    for row, k in enumerate(sorted(tokens)):
        rng = np.random.default_rng([int(seed), int(k), 0x6E])
        gen = np.stack([backend.encode_image(backend.sample(G[row], rng)).vector
                        for _ in range(n_samples)])
        out[k] = pairwise_mean_cosine(gen, cache.class_features(k))
    return out


def pairwise_mean_cosine(A: np.ndarray, B: np.ndarray) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    return float(np.mean(A @ B.T))


@dataclass
class Projection:
    """2-D coordinates of every (template, class) text feature."""

    points: dict[int, np.ndarray]
    template_ids: list[str]
    explained_variance_ratio: np.ndarray
    pca: PCA | None = field(default=None, repr=False)

    def rows(self):
        """``(class, template_id, x, y)`` tuples, class-major."""
        for k in sorted(self.points):
            for tid, (x, y) in zip(self.template_ids, self.points[k]):
                yield k, tid, float(x), float(y)


def fit_pca(X: np.ndarray, dims: int = 2) -> tuple[np.ndarray, PCA | None, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0)
    rank = np.linalg.matrix_rank(centered) if len(X) > 1 else 0
    if rank < dims:
        warnings.warn(f"text features are rank-deficient (rank {rank} < {dims})", RuntimeWarning)
    if rank == 0:
        return np.zeros((len(X), dims)), None, np.zeros(dims)
    pca = PCA(n_components=min(dims, len(X), X.shape[1]), svd_solver="full")
    Y = pca.fit_transform(X)
    if Y.shape[1] < dims:
        Y = np.pad(Y, ((0, 0), (0, dims - Y.shape[1])))
    ratio = np.zeros(dims)
    ratio[: len(pca.explained_variance_ratio_)] = pca.explained_variance_ratio_
    if rank < dims:
        Y[:, rank:] = 0.0
        ratio[rank:] = 0.0
    return Y, pca, ratio


def project_text_features(store, templates: Sequence[PromptTemplate], backend, dims: int = 2) -> Projection:
    """Encode every (template, class) pair and project with PCA fit on all of them."""
    tokens = _tokens_of(store)
    classes = sorted(tokens)
    with torch.no_grad():
        blocks = [text_features(tokens, backend, t).numpy() for t in templates]
    X = np.concatenate(blocks)
    Y, pca, ratio = fit_pca(X, dims)
    T = len(templates)
    points = {k: np.stack([Y[t * len(classes) + i] for t in range(T)]) for i, k in enumerate(classes)}
    return Projection(points, [t.template_id for t in templates], ratio, pca)


def cluster_ratio(projection: Projection) -> float:
    """Mean within-class pairwise distance over mean between-centroid distance."""
    within = []
    for pts in projection.points.values():
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        n = len(pts)
        within.append(d.sum() / (n * (n - 1)) if n > 1 else 0.0)
    C = np.stack([pts.mean(axis=0) for pts in projection.points.values()])
    D = np.linalg.norm(C[:, None] - C[None], axis=-1)
    iu = np.triu_indices(len(C), 1)
    between = D[iu].mean() if len(iu[0]) else np.nan
    return float(np.mean(within) / between)


def cosine_matrix(features: np.ndarray, clf: TextClassifier) -> np.ndarray:
    """Cosines between each feature row and each class feature."""
    return np.stack([cosine_logits(torch.from_numpy(np.asarray(f, dtype=np.float64)),
                                   torch.from_numpy(clf.class_features)).numpy()
                     for f in features])
