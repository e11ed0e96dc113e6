"""Deterministic desk-scale backend.

Every role is a small closed-form map so the whole training objective is
cheap, reproducible and differentiable:

* vocabulary: fixed word list, each row drawn from a generator seeded by a
  hash of ``(seed, word)``; ``D_text = 16``.
* text encoder: mean of the sequence embeddings, fixed linear map to
  ``D_feat = 32``, L2 normalization. The map's range is 8 directions the
  image encoder sees plus 8 it ignores.
* images: 32x32 single-channel float arrays. The latent codec is 4x4
  average pooling to 8x8; decoding repeats each latent pixel over a 4x4 block.
* image encoder: the pooled 8x8 statistics projected on 16 fixed orthonormal
  "semantic" latent directions, zero-padded to ``D_feat``, L2-normalized.
* text-to-latent decoder: the first 16 feature coordinates drive the
  semantic directions, the last 16 drive 16 "nuisance" directions that the
  image encoder does not see.
* schedule: linear betas over ``T_max = 100`` steps.
* noise predictor: damped ideal denoiser around the decoded text feature plus
  a small bilinear (latent x condition) term.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from ..errors import DecodeError, ShapeError
from .base import Backend, BackendDescriptor, ImageFeature, LatentCode

IMAGE_SIZE = 32
LATENT_SIZE = 8
POOL = IMAGE_SIZE // LATENT_SIZE

_BASE_WORDS = """
a an the of my one photo picture image rendering rendition cropped close up
nice small large big little cool weird clean dirty dark bright good bad blurry
sketch painting drawing low resolution black and white pixelated origami toy
itap in on with this that it is object pet flower food aircraft car texture
action animal dog cat bird plant thing face person scene
""".split()

_WORD_RE = re.compile(r"[a-z]+")


def _word_seed(seed: int, word: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{word}".encode()).digest()[:8], "little")


class ToyBackend(Backend):
    """Closed-form backend for verification. All arrays are float64."""

    supports_sampling = True

    D_TEXT = 16
    D_FEAT = 32
    T_MAX = 100

    def __init__(self, seed: int = 0, embedding_scale: float = 0.002,
                 decoder_gain: float = 5.0, beta_start: float = 0.01,
                 beta_end: float = 0.2, damping: float = 0.05,
                 bilinear_gain: float = 0.01, sample_noise: float = 0.1):
        config = dict(seed=int(seed), embedding_scale=embedding_scale,
                      decoder_gain=decoder_gain, beta_start=beta_start,
                      beta_end=beta_end, damping=damping,
                      bilinear_gain=bilinear_gain, sample_noise=sample_noise)
        descriptor = BackendDescriptor(
            name="toy", D_text=self.D_TEXT, D_feat=self.D_FEAT,
            latent_shape=(LATENT_SIZE, LATENT_SIZE), T_max=self.T_MAX,
            deterministic=True,
        )
        super().__init__(descriptor, config)
        self.seed = int(seed)
        self.decoder_gain = float(decoder_gain)
        self.damping = float(damping)
        self.bilinear_gain = float(bilinear_gain)
        self.sample_noise = float(sample_noise)

        letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
        self._words = sorted(set(_BASE_WORDS) | set(letters))
        self._word_ids = {w: i for i, w in enumerate(self._words)}
        self._max_word = max(len(w) for w in self._words)
        self._table = torch.from_numpy(np.stack([
            np.random.default_rng(_word_seed(self.seed, w)).standard_normal(self.D_TEXT)
            for w in self._words
        ]) * embedding_scale)

        rng = np.random.default_rng([self.seed, 1])
        n_latent = LATENT_SIZE * LATENT_SIZE
        q, r = np.linalg.qr(rng.standard_normal((n_latent, n_latent)))
        q = q * np.sign(np.diag(r))
        half = self.D_FEAT // 2
        self._semantic = torch.from_numpy(q[:, :half].copy())
        self._nuisance = torch.from_numpy(q[:, half:2 * half].copy())
        # Text features span 8 visible + 8 nuisance feature directions.
        vis, _ = np.linalg.qr(rng.standard_normal((half, self.D_TEXT // 2)))
        nui, _ = np.linalg.qr(rng.standard_normal((half, self.D_TEXT // 2)))
        basis = np.zeros((self.D_FEAT, self.D_TEXT))
        basis[:half, :self.D_TEXT // 2] = vis
        basis[half:, self.D_TEXT // 2:] = nui
        self._text_basis = torch.from_numpy(basis)
        mix = rng.standard_normal((self.D_TEXT, self.D_TEXT)) / np.sqrt(self.D_TEXT)
        self._text_proj = torch.from_numpy(basis @ mix)
        self._bilinear = torch.from_numpy(
            rng.standard_normal((n_latent, self.D_FEAT)) / np.sqrt(self.D_FEAT))

        betas = np.linspace(beta_start, beta_end, self.T_MAX)
        self._betas = torch.from_numpy(betas)
        self._abar = torch.from_numpy(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    # -- tokenizer ---------------------------------------------------------
    @property
    def vocab_size(self) -> int:
        return len(self._words)

    def vocabulary(self) -> Sequence[str]:
        return self._words

    def _tokenize_words(self, text: str) -> list[int]:
        ids = []
        for word in _WORD_RE.findall(text.lower()):
            pos = 0
            while pos < len(word):
                for end in range(min(len(word), pos + self._max_word), pos, -1):
                    if word[pos:end] in self._word_ids:
                        ids.append(self._word_ids[word[pos:end]])
                        pos = end
                        break
        return ids

    def vocab_embeddings(self, ids: Sequence[int]) -> torch.Tensor:
        return self._table[list(ids)]

    # -- text --------------------------------------------------------------
    def encode_embeddings(self, seq: torch.Tensor) -> torch.Tensor:
        h = self._text_proj @ seq.mean(dim=0)
        return h / h.norm()

    # -- images ------------------------------------------------------------
    def load_image(self, ref: Any) -> np.ndarray:
        if isinstance(ref, np.ndarray):
            image = ref
        else:
            path = Path(ref)
            try:
                if path.suffix == ".npy":
                    image = np.load(path, allow_pickle=False)
                else:
                    from PIL import Image

                    with Image.open(path) as im:
                        im = im.convert("L").resize((IMAGE_SIZE, IMAGE_SIZE))
                        image = np.asarray(im, dtype=np.float64) / 255.0
            except (OSError, ValueError) as exc:
                raise DecodeError(f"cannot decode image {ref}: {exc}") from exc
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {image.shape}")
        return image

    def encode_latent(self, image: Any) -> torch.Tensor:
        image = self.load_image(image)
        pooled = image.reshape(LATENT_SIZE, POOL, LATENT_SIZE, POOL).mean(axis=(1, 3))
        return torch.from_numpy(pooled)

    def encode_image(self, image: Any) -> ImageFeature:
        z = self.encode_latent(image).reshape(-1)
        visible = self._semantic.T @ z
        f = torch.cat([visible, torch.zeros_like(visible)])
        norm = f.norm()
        if norm == 0:
            raise ShapeError("image has no signal in the encoder's input directions")
        return ImageFeature((f / norm).numpy())

    def visible_text_basis(self) -> np.ndarray:
        """Orthonormal feature-space directions the text encoder can reach and
        the image encoder can see, shape ``(D_feat, 8)``."""
        return self._text_basis[:, :self.D_TEXT // 2].numpy().copy()

    def nuisance_text_basis(self) -> np.ndarray:
        """Reachable feature directions invisible to the image encoder."""
        return self._text_basis[:, self.D_TEXT // 2:].numpy().copy()

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        z = torch.as_tensor(z).reshape(LATENT_SIZE, LATENT_SIZE).detach().numpy()
        return np.kron(z, np.ones((POOL, POOL)))

    def text_to_latent(self, cond: torch.Tensor) -> torch.Tensor:
        half = self.D_FEAT // 2
        z = self._semantic @ cond[:half] + self._nuisance @ cond[half:]
        return (self.decoder_gain * z).reshape(LATENT_SIZE, LATENT_SIZE)

    def synthesize_image(self, feature: np.ndarray, nuisance: np.ndarray | None = None,
                         gain: float | None = None) -> np.ndarray:
        """Image whose encoder feature points along ``feature[:16]``.

        ``nuisance`` (16 values) lands in directions the image encoder ignores.
        """
        half = self.D_FEAT // 2
        feature = np.asarray(feature, dtype=np.float64)
        cond = np.zeros(self.D_FEAT)
        cond[:half] = feature[:half]
        if nuisance is not None:
            cond[half:] = nuisance
        z = self.text_to_latent(torch.from_numpy(cond))
        if gain is not None:
            z = z * (gain / self.decoder_gain)
        return self.decode_latent(z)

    # -- diffusion ---------------------------------------------------------
    def alphas_cumprod(self) -> torch.Tensor:
        return self._abar

    def betas(self) -> torch.Tensor:
        return self._betas

    def predict_noise(self, z: LatentCode, cond: torch.Tensor) -> torch.Tensor:
        cond = torch.as_tensor(cond, dtype=torch.float64)
        if tuple(z.tensor.shape) != tuple(self.descriptor.latent_shape):
            raise ShapeError(f"latent shape {tuple(z.tensor.shape)} != {self.descriptor.latent_shape}")
        if cond.shape != (self.D_FEAT,):
            raise ShapeError(f"condition shape {tuple(cond.shape)} != ({self.D_FEAT},)")
        abar = self._abar[z.timestep]
        zt = z.tensor
        denoise = (zt - abar.sqrt() * self.text_to_latent(cond)) / (1.0 - abar).sqrt()
        mix = (self._bilinear @ cond).reshape(zt.shape)
        return (1.0 - self.damping) * denoise + self.bilinear_gain * zt * mix

    def sample(self, cond: torch.Tensor, rng: np.random.Generator) -> np.ndarray:
        """Decode the condition to a latent and add seeded Gaussian noise."""
        z = self.text_to_latent(torch.as_tensor(cond, dtype=torch.float64).detach())
        scale = self.sample_noise * self.decoder_gain / LATENT_SIZE
        z = z + scale * torch.from_numpy(rng.standard_normal(z.shape))
        return self.decode_latent(z)

    # -- bookkeeping -------------------------------------------------------
    def state_bytes(self) -> bytes:
        parts = (self._table, self._semantic, self._nuisance, self._text_proj, self._text_basis,
                 self._bilinear, self._abar)
        return b"".join(p.numpy().tobytes() for p in parts)
