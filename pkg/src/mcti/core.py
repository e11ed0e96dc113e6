"""Domain types, prompt templating and token initialization."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import torch

from .errors import EmptyStringError, OutOfVocabularyError, PlaceholderError

PLACEHOLDER = "{}"
PSEUDO_WORD_RE = re.compile(r"<s\*_(\d+)>")


class Phase(str, enum.Enum):
    WARMUP = "warmup"
    MCTI = "mcti"


def pseudo_word(class_index: int) -> str:
    """Pseudo-word for a 1-based class index, e.g. ``<s*_7>``."""
    if int(class_index) < 1:
        raise ValueError("class indices are 1-based")
    return f"<s*_{int(class_index)}>"


@dataclass
class ConceptToken:
    """A learnable embedding bound to one pseudo-word.

    ``embedding`` is a 1-D float64 tensor. It is the only mutable field and
    only the trainer writes to it.
    """

    concept_id: str
    pseudo_word: str
    embedding: torch.Tensor
    init_word: str
    steps_trained: int = 0
    phase: Phase = Phase.WARMUP
    warmup_steps_done: int = 0
    mcti_steps_done: int = 0

    def __post_init__(self):
        self.embedding = torch.as_tensor(self.embedding, dtype=torch.float64).detach().clone()
        if self.embedding.ndim != 1:
            raise ValueError("embedding must be a vector")
        if not torch.isfinite(self.embedding).all():
            raise ValueError(f"embedding of {self.pseudo_word} has non-finite values")
        self.phase = Phase(self.phase)

    @property
    def class_index(self) -> int:
        m = PSEUDO_WORD_RE.fullmatch(self.pseudo_word)
        return int(m.group(1)) if m else int(self.concept_id)

    def copy(self) -> "ConceptToken":
        return ConceptToken(
            concept_id=self.concept_id,
            pseudo_word=self.pseudo_word,
            embedding=self.embedding.clone(),
            init_word=self.init_word,
            steps_trained=self.steps_trained,
            phase=self.phase,
            warmup_steps_done=self.warmup_steps_done,
            mcti_steps_done=self.mcti_steps_done,
        )


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str

    def validate(self) -> None:
        count = self.text.count(PLACEHOLDER)
        if count == 0:
            raise PlaceholderError(f"template {self.template_id!r} has no '{{}}' slot")
        if count > 1:
            raise PlaceholderError(
                f"template {self.template_id!r} has {count} placeholders, expected exactly 1"
            )

    def render(self, word: str) -> str:
        self.validate()
        return self.text.replace(PLACEHOLDER, word)


T1 = PromptTemplate("T1", "a photo of a {}")
T2 = PromptTemplate("T2", "a photo of the nice {}")
T3 = PromptTemplate("T3", "a cropped photo of the {}")
NAMED_TEMPLATES = {t.template_id: t for t in (T1, T2, T3)}


def load_templates(path: str | Path | None = None, *, prefix: str = "tpl",
                   text: str | None = None) -> list[PromptTemplate]:
    """Read a template library file: UTF-8, one template per line.

    Line order defines the ids (``tpl00``, ``tpl01``, ...). Blank lines are
    skipped.
    """
    if text is None:
        text = Path(path).read_text(encoding="utf-8")
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    width = max(2, len(str(len(lines) - 1)))
    templates = [PromptTemplate(f"{prefix}{i:0{width}d}", ln) for i, ln in enumerate(lines)]
    for t in templates:
        t.validate()
    return templates


def _packaged(name: str) -> str:
    return resources.files("mcti.data").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class PromptLibrary:
    training_templates: tuple[PromptTemplate, ...]
    inference_template: PromptTemplate = T1
    visualization_templates: tuple[PromptTemplate, ...] = ()

    def __post_init__(self):
        if not self.training_templates:
            raise ValueError("training_templates must be nonempty")
        if len(self.visualization_templates) != 27:
            raise ValueError(
                f"expected 27 visualization templates, got {len(self.visualization_templates)}"
            )

    @classmethod
    def default(cls) -> "PromptLibrary":
        return cls(
            training_templates=tuple(load_templates(text=_packaged("training_templates.txt"))),
            inference_template=T1,
            visualization_templates=tuple(
                load_templates(text=_packaged("visualization_templates.txt"), prefix="viz")
            ),
        )

    def template(self, template_id: str) -> PromptTemplate:
        if template_id in NAMED_TEMPLATES:
            return NAMED_TEMPLATES[template_id]
        for t in self.training_templates + self.visualization_templates:
            if t.template_id == template_id:
                return t
        raise KeyError(f"unknown template id {template_id!r}")


@dataclass(frozen=True)
class FewShotDataset:
    """N-shot training set. ``samples`` maps class index 1..K to N image refs."""

    K: int
    N: int
    samples: Mapping[int, tuple]
    split_seed: int = 0
    dataset_id: str = "dataset"

    def __post_init__(self):
        if self.K < 1 or self.N < 1:
            raise ValueError("K and N must be positive")
        if sorted(self.samples) != list(range(1, self.K + 1)):
            raise ValueError("class indices must be contiguous 1..K")
        for k, refs in self.samples.items():
            if len(refs) != self.N:
                raise ValueError(f"class {k} has {len(refs)} samples, expected {self.N}")

    def keys(self) -> list[tuple[int, int]]:
        """Sample keys ``(class, sample)`` in storage order, both 1-based."""
        return [(k, n) for k in range(1, self.K + 1) for n in range(1, self.N + 1)]

    def ref(self, k: int, n: int):
        return self.samples[k][n - 1]


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    scale_s: float = 10.0
    lr: float = 5e-4
    warmup_steps: int = 3000
    mcti_steps: int = 100
    rng_seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    init_word: str = "object"
    context_tokens: int = 16
    context_epochs: int = 200
    context_lr: float = 2e-3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not self.scale_s > 0:
            raise ValueError("scale_s must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0 or self.mcti_steps < 0:
            raise ValueError("step counts must be nonnegative")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass(frozen=True)
class TokenizedPrompt:
    """Token ids of a rendered prompt; ``slot`` is the learnable position."""

    ids: tuple[int, ...]
    slot: int
    pseudo_word: str
    text: str
    template_id: str = ""

    def __len__(self):
        return len(self.ids)


def render_prompt(template: PromptTemplate, token: ConceptToken, backend) -> TokenizedPrompt:
    """Render ``template`` with the token's pseudo-word and tokenize it.

    Exactly one position of the result resolves to the token's embedding;
    every other position is a frozen vocabulary id.
    """
    text = template.render(token.pseudo_word)
    slot_id = backend.pseudo_word_id(token.pseudo_word)
    ids = tuple(backend.tokenize(text))
    slots = [i for i, tid in enumerate(ids) if tid == slot_id]
    if len(slots) != 1:
        raise PlaceholderError(
            f"rendered prompt {text!r} has {len(slots)} learnable slots, expected 1"
        )
    return TokenizedPrompt(ids=ids, slot=slots[0], pseudo_word=token.pseudo_word,
                           text=text, template_id=template.template_id)


def init_token_embedding(init_word: str, backend, class_index: int = 1,
                         concept_id: str | None = None) -> ConceptToken:
    """New warm-up token whose embedding copies ``init_word``'s first sub-token."""
    if not init_word or not init_word.strip():
        raise EmptyStringError("init_word must be a nonempty string")
    ids = backend.tokenize(init_word)
    if not ids:
        raise OutOfVocabularyError(f"{init_word!r} tokenizes to no vocabulary ids")
    embedding = backend.vocab_embeddings([ids[0]])[0]
    word = pseudo_word(class_index)
    backend.register_pseudo_word(word)
    return ConceptToken(
        concept_id=concept_id if concept_id is not None else str(class_index),
        pseudo_word=word,
        embedding=embedding,
        init_word=init_word,
    )


def check_unique_pseudo_words(tokens: Iterable[ConceptToken]) -> None:
    seen = set()
    for t in tokens:
        if t.pseudo_word in seen:
            raise ValueError(f"duplicate pseudo-word {t.pseudo_word}")
        seen.add(t.pseudo_word)

