"""scikit-learn style wrapper around the full train-then-classify pipeline."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import classifier as clf_mod
from .backend import load_backend
from .core import FewShotDataset, PromptLibrary, TrainConfig
from .errors import PartialTrainingError
from .features import build_feature_cache
from .store import TokenStore
from .trainer import train_concepts, train_unified_context


def check_images(X) -> list:
    """Accept a list of image refs (arrays or paths) or a 3-D array stack."""
    if isinstance(X, np.ndarray):
        if X.ndim == 2:
            raise ValueError("expected a sequence of images, got a single 2-D array")
        return list(X)
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        raise ValueError("X must be a sequence of images or image paths")
    if len(X) == 0:
        raise ValueError("X is empty")
    return list(X)


def check_few_shot_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Return ``(classes, encoded 1..K labels, N)``; every class needs the same count."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries")
    check_classification_targets(y)
    classes, encoded, counts = np.unique(y, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if len(set(counts.tolist())) != 1:
        raise ValueError(f"every class needs the same number of shots, got counts {counts.tolist()}")
    return classes, encoded + 1, int(counts[0])


class MCTIClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier: learn one token per class, predict by text-image cosine.

    ``X`` is a sequence of images the backend can load; ``y`` any hashable
    labels with the same count per class. ``predict_proba`` uses the scaled
    cosine softmax with scale ``s``.
    """

    def __init__(self, backend="toy", backend_options=None, alpha=1.0, beta=1.0, s=10.0,
                 lr=5e-4, warmup_steps=3000, mcti_steps=100, init_word="object",
                 template_id="T1", use_context=False, context_tokens=16, context_epochs=200,
                 random_state=0, n_jobs=1):
        self.backend = backend
        self.backend_options = backend_options
        self.alpha = alpha
        self.beta = beta
        self.s = s
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.mcti_steps = mcti_steps
        self.init_word = init_word
        self.template_id = template_id
        self.use_context = use_context
        self.context_tokens = context_tokens
        self.context_epochs = context_epochs
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _make_backend(self):
        if not isinstance(self.backend, str):
            return self.backend
        return load_backend({"name": self.backend, **(self.backend_options or {})})

    def _train_config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, beta=self.beta, scale_s=self.s, lr=self.lr,
                           warmup_steps=self.warmup_steps, mcti_steps=self.mcti_steps,
                           rng_seed=int(self.random_state or 0), init_word=self.init_word,
                           context_tokens=self.context_tokens, context_epochs=self.context_epochs)

    def fit(self, X, y):
        images = check_images(X)
        classes, encoded, N = check_few_shot_labels(y, len(images))
        samples = {k: tuple(img for img, lab in zip(images, encoded) if lab == k)
                   for k in range(1, len(classes) + 1)}
        ds = FewShotDataset(K=len(classes), N=N, samples=samples,
                            split_seed=int(self.random_state or 0), dataset_id="estimator")
        backend = self._make_backend()
        cfg = self._train_config()
        cache = build_feature_cache(ds, backend)
        results, failures = train_concepts(ds, cache, cfg, backend, parallelism=self.n_jobs)
        store = TokenStore.from_training({k: r.token for k, r in results.items()},
                                         backend=backend, dataset=ds, config=cfg)
        if failures:
            raise PartialTrainingError(failures, store)
        if self.use_context:
            store.context = train_unified_context(store.tokens, ds, cache, self.context_tokens,
                                                  cfg, backend)
        self.classes_ = classes
        self.n_features_in_ = backend.descriptor.D_feat
        self.backend_ = backend
        self.store_ = store
        self.cache_ = cache
        self.step_logs_ = {k: r.step_log for k, r in results.items()}
        template = PromptLibrary.default().template(self.template_id)
        self.classifier_ = clf_mod.build_text_classifier(store, template, store.context,
                                                         backend=backend)
        return self

    def _features(self, X) -> np.ndarray:
        return np.stack([self.backend_.encode_image(img).vector for img in check_images(X)])

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        F = self._features(X)
        F = F / np.linalg.norm(F, axis=1, keepdims=True)
        return F @ self.classifier_.class_features.T

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        return clf_mod.predict_proba(self.classifier_, self._features(X), self.s)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        return self.classes_[clf_mod.predict(self.classifier_, self._features(X)) - 1]
