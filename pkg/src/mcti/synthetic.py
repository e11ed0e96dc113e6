"""Synthetic few-shot datasets for the toy backend.

Each class has a unit prototype in the image encoder's visible subspace,
built from a shared component plus a class-specific direction, and a
class-level "nuisance" pattern in latent directions the image encoder
ignores. Reconstruction cares about the nuisance; classification does not.
That gap is what the discriminative regularizer is meant to close.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend.toy import ToyBackend


@dataclass
class SyntheticSpec:
    K: int = 5
    n_train: int = 20
    n_test: int = 20
    common_weight: float = 0.3
    nuisance_scale: float = 1.0
    feature_noise: float = 0.15
    nuisance_noise: float = 0.3
    pixel_noise: float = 0.0
    seed: int = 0


@dataclass
class SyntheticData:
    prototypes: np.ndarray
    nuisance: np.ndarray
    train: dict[int, list[np.ndarray]]
    test: list[tuple[np.ndarray, int]]

    def test_images(self):
        return [img for img, _ in self.test]

    def test_labels(self):
        return np.array([k for _, k in self.test])


def make_synthetic(backend: ToyBackend, spec: SyntheticSpec | None = None) -> SyntheticData:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng([spec.seed, 0x5E])
    half = backend.D_FEAT // 2
    vis = backend.visible_text_basis()
    nui = backend.nuisance_text_basis()
    r = vis.shape[1]
    common = rng.standard_normal(r)
    common /= np.linalg.norm(common)
    protos = np.zeros((spec.K, backend.D_FEAT))
    for k in range(spec.K):
        u = rng.standard_normal(r)
        u -= (u @ common) * common
        u /= np.linalg.norm(u)
        protos[k] = vis @ (spec.common_weight * common + u)
        protos[k] /= np.linalg.norm(protos[k])
    coef = rng.standard_normal((spec.K, nui.shape[1])) / np.sqrt(nui.shape[1])
    coef *= spec.nuisance_scale * rng.uniform(0.3, 1.7, size=(spec.K, 1))
    nuisance = (coef @ nui.T)[:, half:]

    def draw(k):
        f = protos[k].copy()
        f[:half] += spec.feature_noise * rng.standard_normal(half) / np.sqrt(half)
        nz = nuisance[k] + spec.nuisance_noise * rng.standard_normal(half) / np.sqrt(half)
        img = backend.synthesize_image(f, nz)
        if spec.pixel_noise:
            img = img + spec.pixel_noise * rng.standard_normal(img.shape)
        return img

    train = {k + 1: [draw(k) for _ in range(spec.n_train)] for k in range(spec.K)}
    test = [(draw(k), k + 1) for k in range(spec.K) for _ in range(spec.n_test)]
    return SyntheticData(protos, nuisance, train, test)


def write_synthetic(root, backend: ToyBackend, spec: SyntheticSpec | None = None) -> Path:
    """Write ``root/train/class_XX/*.npy`` and ``root/test/class_XX/*.npy``."""
    root = Path(root)
    data = make_synthetic(backend, spec)
    for k, images in data.train.items():
        d = root / "train" / f"class_{k:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            np.save(d / f"img_{i:03d}.npy", img)
    counts: dict[int, int] = {}
    for img, k in data.test:
        d = root / "test" / f"class_{k:02d}"
        d.mkdir(parents=True, exist_ok=True)
        i = counts.get(k, 0)
        counts[k] = i + 1
        np.save(d / f"img_{i:03d}.npy", img)
    return root
