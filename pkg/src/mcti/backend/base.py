"""Backend contract: text/image encoders, latent codec, noise schedule and
noise predictor behind one interface.

A concrete backend implements the abstract methods below. Everything the
trainer and classifier need goes through this surface, so a real latent
diffusion stack can be plugged in by writing an adapter module (see
:func:`mcti.backend.load_backend`).
"""

from __future__ import annotations

import abc
import hashlib
import json
import re
import threading
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np
import torch

from ..core import ConceptToken, TokenizedPrompt, render_prompt
from ..errors import (
    SamplingUnsupportedError,
    SequenceTooLongError,
    ShapeError,
    TimestepError,
    UnknownPseudoWordError,
)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    D_text: int
    D_feat: int
    latent_shape: tuple[int, ...]
    T_max: int
    deterministic: bool
    max_length: int = 77

    def __post_init__(self):
        dims = (self.D_text, self.D_feat, self.T_max, self.max_length, *self.latent_shape)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all backend dimensions must be positive: {self}")


@dataclass
class TextFeature:
    vector: torch.Tensor
    source_prompt: TokenizedPrompt | None = None


@dataclass
class ImageFeature:
    vector: np.ndarray
    sample_key: tuple[int, int] | None = None


@dataclass
class LatentCode:
    tensor: torch.Tensor
    timestep: int
    noise: torch.Tensor

    def __post_init__(self):
        if tuple(self.tensor.shape) != tuple(self.noise.shape):
            raise ShapeError(
                f"latent {tuple(self.tensor.shape)} and noise {tuple(self.noise.shape)} differ"
            )


class Backend(abc.ABC):
    """Abstract backend. Read-only after construction apart from the
    pseudo-word registry, which is guarded by a lock."""

    supports_sampling = False

    def __init__(self, descriptor: BackendDescriptor, config: dict | None = None):
        self.descriptor = descriptor
        self.config = dict(config or {})
        self._pseudo_words: dict[str, int] = {}
        self._registry_lock = threading.Lock()

    # -- tokenizer ---------------------------------------------------------
    @property
    @abc.abstractmethod
    def vocab_size(self) -> int: ...

    @abc.abstractmethod
    def _tokenize_words(self, text: str) -> list[int]:
        """Tokenize text that contains no pseudo-words."""

    @abc.abstractmethod
    def vocab_embeddings(self, ids: Sequence[int]) -> torch.Tensor:
        """Frozen embedding rows, shape ``(len(ids), D_text)``."""

    def register_pseudo_word(self, word: str) -> int:
        with self._registry_lock:
            if word not in self._pseudo_words:
                if word in self.vocabulary():
                    raise ValueError(f"pseudo-word {word!r} collides with the vocabulary")
                self._pseudo_words[word] = self.vocab_size + len(self._pseudo_words)
            return self._pseudo_words[word]

    def pseudo_word_id(self, word: str) -> int:
        try:
            return self._pseudo_words[word]
        except KeyError:
            raise UnknownPseudoWordError(f"pseudo-word {word!r} is not registered") from None

    def vocabulary(self) -> Sequence[str]:
        return ()

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        pos = 0
        for m in _PSEUDO_SPLIT.finditer(text):
            ids.extend(self._tokenize_words(text[pos:m.start()]))
            ids.append(self.pseudo_word_id(m.group(0)))
            pos = m.end()
        ids.extend(self._tokenize_words(text[pos:]))
        return ids

    # -- text --------------------------------------------------------------
    @abc.abstractmethod
    def encode_embeddings(self, seq: torch.Tensor) -> torch.Tensor:
        """Encode a ``(L, D_text)`` embedding sequence to a unit ``D_feat`` vector."""

    def prompt_embeddings(self, prompt: TokenizedPrompt, embedding: torch.Tensor,
                          context: torch.Tensor | None = None) -> torch.Tensor:
        """Assemble the input sequence; ``context`` replaces the template words."""
        slot = embedding.reshape(1, -1).to(torch.float64)
        if context is not None:
            return torch.cat([context.to(torch.float64), slot], dim=0)
        ids = list(prompt.ids)
        frozen = self.vocab_embeddings([i if j != prompt.slot else 0 for j, i in enumerate(ids)])
        return torch.cat([frozen[:prompt.slot], slot, frozen[prompt.slot + 1:]], dim=0)

    def encode_text(self, prompt: TokenizedPrompt, embedding: torch.Tensor,
                    context: torch.Tensor | None = None) -> TextFeature:
        seq = self.prompt_embeddings(prompt, embedding, context)
        if seq.shape[0] > self.descriptor.max_length:
            raise SequenceTooLongError(
                f"prompt has {seq.shape[0]} tokens, max is {self.descriptor.max_length}"
            )
        return TextFeature(self.encode_embeddings(seq), prompt)

    def encode_token(self, template, token: ConceptToken, context=None) -> TextFeature:
        return self.encode_text(render_prompt(template, token, self), token.embedding, context)

    # -- images ------------------------------------------------------------
    @abc.abstractmethod
    def load_image(self, ref: Any) -> np.ndarray: ...

    @abc.abstractmethod
    def encode_image(self, image: Any) -> ImageFeature: ...

    @abc.abstractmethod
    def encode_latent(self, image: Any) -> torch.Tensor: ...

    # -- diffusion ---------------------------------------------------------
    @abc.abstractmethod
    def alphas_cumprod(self) -> torch.Tensor:
        """Cumulative signal coefficients for t = 0..T_max (index 0 is 1)."""

    def add_noise(self, z0: torch.Tensor, t: int, rng: np.random.Generator) -> LatentCode:
        t = int(t)
        if not 0 <= t <= self.descriptor.T_max:
            raise TimestepError(f"timestep {t} outside [0, {self.descriptor.T_max}]")
        z0 = torch.as_tensor(z0, dtype=torch.float64)
        if tuple(z0.shape) != tuple(self.descriptor.latent_shape):
            raise ShapeError(f"latent shape {tuple(z0.shape)} != {self.descriptor.latent_shape}")
        noise = torch.from_numpy(rng.standard_normal(self.descriptor.latent_shape))
        abar = self.alphas_cumprod()[t]
        zt = abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise
        return LatentCode(zt, t, noise)

    @abc.abstractmethod
    def predict_noise(self, z: LatentCode, cond: torch.Tensor) -> torch.Tensor: ...

    def sample(self, cond: torch.Tensor, rng: np.random.Generator) -> np.ndarray:
        raise SamplingUnsupportedError(f"backend {self.descriptor.name!r} cannot sample images")

    # -- bookkeeping -------------------------------------------------------
    @abc.abstractmethod
    def state_bytes(self) -> bytes:
        """Serialized frozen weights, for change detection."""

    def fingerprint(self) -> str:
        payload = {
            "descriptor": asdict(self.descriptor),
            "config": self.config,
        }
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode())
        return f"{self.descriptor.name}:{self.descriptor.D_text}x{self.descriptor.D_feat}:{digest.hexdigest()[:16]}"


_PSEUDO_SPLIT = re.compile(r"<[^<>\s]+>")
