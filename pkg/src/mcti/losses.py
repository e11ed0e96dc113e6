"""Training and inference objectives.

All functions take torch tensors (numpy arrays are converted) and are
differentiable with respect to the text feature.

The probability model is a cosine softmax with ``s`` acting as an inverse
temperature: ``p_j = exp(s * cos(g, f_j)) / sum_l exp(s * cos(g, f_l))``.
Reading ``s`` as a plain multiplicative factor in front of each exponential
would cancel out of the ratio and make it a no-op, which contradicts the
observed sensitivity of training to ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ShapeError, ZeroNormError

NORM_EPS = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


@dataclass
class PrototypeSet:
    """One sampled image feature per class; row ``j - 1`` belongs to class ``j``."""

    features: torch.Tensor
    target_class: int
    sample_indices: tuple[int, ...] = ()

    def __post_init__(self):
        self.features = _as_tensor(self.features)
        if self.features.ndim != 2:
            raise ShapeError("prototype features must be a (K, D) matrix")
        K = self.features.shape[0]
        if not 1 <= int(self.target_class) <= K:
            raise IndexError(f"target_class {self.target_class} outside 1..{K}")

    @property
    def K(self) -> int:
        return self.features.shape[0]


def cosine_logits(g, F) -> torch.Tensor:
    """Cosine of vector ``g`` against each row of ``F``."""
    g = _as_tensor(g)
    F = _as_tensor(F)
    if F.ndim == 1:
        F = F.unsqueeze(0)
    if g.shape[-1] != F.shape[-1]:
        raise ShapeError(f"dimension mismatch: {g.shape[-1]} vs {F.shape[-1]}")
    g_norm = g.norm()
    F_norm = F.norm(dim=-1)
    if g_norm <= NORM_EPS or bool((F_norm <= NORM_EPS).any()):
        raise ZeroNormError("cosine similarity undefined for a zero-norm vector")
    return (F @ g) / (F_norm * g_norm)


def softmax_stable(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max()
    e = shifted.exp()
    return e / e.sum()


def predict_probabilities(g, protos: PrototypeSet | torch.Tensor, s: float) -> torch.Tensor:
    """Class probabilities of text feature ``g`` against the prototypes."""
    if not s > 0:
        raise ValueError("scale s must be positive")
    F = protos.features if isinstance(protos, PrototypeSet) else protos
    return softmax_stable(s * cosine_logits(g, F))


def discriminative_regularizer(g, protos: PrototypeSet, s: float) -> torch.Tensor:
    """Cross-entropy of the one-hot target under :func:`predict_probabilities`."""
    if not s > 0:
        raise ValueError("scale s must be positive")
    logits = s * cosine_logits(g, protos.features)
    log_probs = logits - torch.logsumexp(logits, dim=0)
    return -log_probs[protos.target_class - 1]


def regularizer_grad(g, protos: PrototypeSet, s: float) -> torch.Tensor:
    """Closed-form gradient of :func:`discriminative_regularizer` w.r.t. ``g``."""
    g = _as_tensor(g).detach()
    F = protos.features
    p = predict_probabilities(g, F, s)
    y = torch.zeros_like(p)
    y[protos.target_class - 1] = 1.0
    g_norm = g.norm()
    F_unit = F / F.norm(dim=-1, keepdim=True)
    cos = F_unit @ g / g_norm
    # d cos_j / d g = f_j/(|f_j||g|) - cos_j g/|g|^2
    dcos = F_unit / g_norm - cos[:, None] * g[None, :] / g_norm**2
    return s * ((p - y)[:, None] * dcos).sum(dim=0)


def mse_noise_loss(predicted, actual_noise) -> torch.Tensor:
    predicted = _as_tensor(predicted)
    actual_noise = _as_tensor(actual_noise)
    if predicted.shape != actual_noise.shape:
        raise ShapeError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(actual_noise.shape)}")
    return ((predicted - actual_noise) ** 2).mean()


def combined_loss(l_mse, l_reg, alpha: float, beta: float):
    """``alpha * l_mse + beta * l_reg``.

    A term whose weight is exactly zero is detached, so it contributes no
    gradient at all (not even a zero-times-inf NaN).
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    terms = []
    for weight, value in ((alpha, l_mse), (beta, l_reg)):
        if weight == 0:
            value = value.detach() if isinstance(value, torch.Tensor) else value
            terms.append(0.0 * value)
        elif weight == 1:
            terms.append(value)
        else:
            terms.append(weight * value)
    return terms[0] + terms[1]


def accuracy(predicted: Sequence[int], labels: Sequence[int]) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    return float((predicted == labels).mean())
