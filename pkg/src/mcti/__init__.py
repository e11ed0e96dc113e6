"""Multi-class textual inversion: discriminatively regularized concept tokens
for few-shot classification."""

from .backend import Backend, ToyBackend, load_backend
from .classifier import (
    TextClassifier,
    build_text_classifier,
    classify,
    evaluate_accuracy,
    generation_similarity,
    project_text_features,
)
from .config import load_config
from .core import T1, T2, T3, ConceptToken, FewShotDataset, PromptLibrary, PromptTemplate, TrainConfig
from .estimator import MCTIClassifier
from .features import FeatureCache, build_feature_cache, ingest_dataset, load_cache, sample_nshot, save_cache
from .losses import combined_loss, discriminative_regularizer, predict_probabilities
from .store import TokenStore
from .trainer import train_concepts, train_mcti, train_ti_warmup, train_unified_context

__version__ = "0.1.0"

__all__ = [
    "Backend", "ToyBackend", "load_backend", "TextClassifier", "build_text_classifier",
    "classify", "evaluate_accuracy", "generation_similarity", "project_text_features",
    "load_config", "T1", "T2", "T3", "ConceptToken", "FewShotDataset", "PromptLibrary",
    "PromptTemplate", "TrainConfig", "MCTIClassifier", "FeatureCache", "build_feature_cache",
    "ingest_dataset", "load_cache", "sample_nshot", "save_cache", "combined_loss",
    "discriminative_regularizer", "predict_probabilities", "TokenStore", "train_concepts",
    "train_mcti", "train_ti_warmup", "train_unified_context",
]
