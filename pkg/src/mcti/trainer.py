"""Per-concept token optimization.

Each concept is trained by its own :class:`TrainJob`: a warm-up on the
noise-reconstruction loss alone, then a short phase on the weighted sum of
reconstruction loss and the discriminative regularizer. Only the job's
token embedding is a parameter; backend weights and the feature cache are
read-only, so jobs can run concurrently.

Randomness comes from two streams per job, both derived from
``(rng_seed, class_index)``: a *diffusion* stream (image, timestep, noise,
template) and a *prototype* stream. Keeping them apart means a run with
``beta = 0`` consumes the diffusion stream exactly like extra warm-up steps.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .core import (
    ConceptToken,
    FewShotDataset,
    Phase,
    PromptLibrary,
    PromptTemplate,
    T1,
    TrainConfig,
    init_token_embedding,
    render_prompt,
)
from .errors import (
    CacheIncompleteError,
    FingerprintMismatchError,
    MCTIError,
    MissingTokenError,
    PhaseError,
)
from .features import FeatureCache
from .losses import (
    PrototypeSet,
    combined_loss,
    discriminative_regularizer,
    mse_noise_loss,
)

logger = logging.getLogger(__name__)


def job_streams(rng_seed: int, class_index: int) -> tuple[np.random.Generator, np.random.Generator]:
    diffusion, protos = np.random.SeedSequence([int(rng_seed), int(class_index)]).spawn(2)
    return np.random.default_rng(diffusion), np.random.default_rng(protos)


def sample_prototypes(dataset: FewShotDataset, cache: FeatureCache, target_class: int,
                      rng: np.random.Generator) -> PrototypeSet:
    """One uniformly drawn cached feature per class."""
    if not 1 <= int(target_class) <= dataset.K:
        raise IndexError(f"target_class {target_class} outside 1..{dataset.K}")
    if cache.K != dataset.K or cache.N != dataset.N or len(cache.keys) != dataset.K * dataset.N:
        raise CacheIncompleteError(
            f"cache holds {len(cache.keys)} entries, dataset needs {dataset.K * dataset.N}"
        )
    picks = tuple(int(n) for n in rng.integers(1, dataset.N + 1, size=dataset.K))
    feats = np.stack([cache.feature(j, n) for j, n in enumerate(picks, start=1)])
    return PrototypeSet(torch.from_numpy(feats.astype(np.float64)), int(target_class), picks)


@dataclass
class StepRecord:
    step: int
    l_mse: float
    l_reg: float
    l_total: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "l_mse": self.l_mse,
                           "l_reg": self.l_reg, "l_total": self.l_total})


class TrainJob:
    """Optimization state for a single concept token.

    The AdamW state persists across the two phases, so the second phase is
    a continuation of the first rather than a restart.
    """

    def __init__(self, token: ConceptToken, dataset: FewShotDataset, cache: FeatureCache,
                 config: TrainConfig, backend, templates: Sequence[PromptTemplate] | None = None,
                 template_sampler_seed: int | None = None):
        if cache.fingerprint != backend.fingerprint():
            raise FingerprintMismatchError("feature cache was built with a different backend")
        self.token = token
        self.class_index = token.class_index
        if not 1 <= self.class_index <= dataset.K:
            raise IndexError(f"token {token.pseudo_word} has no class in 1..{dataset.K}")
        self.dataset = dataset
        self.cache = cache
        self.config = config
        self.backend = backend
        self.templates = tuple(templates or PromptLibrary.default().training_templates)
        seed = config.rng_seed if template_sampler_seed is None else template_sampler_seed
        self.template_sampler_seed = int(seed)
        self.diffusion_rng, self.proto_rng = job_streams(seed, self.class_index)
        backend.register_pseudo_word(token.pseudo_word)
        self.prompts = [render_prompt(t, token, backend) for t in self.templates]
        self.latents = [backend.encode_latent(dataset.ref(self.class_index, n))
                        for n in range(1, dataset.N + 1)]
        self.param = torch.nn.Parameter(token.embedding.clone())
        self.optimizer = torch.optim.AdamW(
            [self.param], lr=config.lr, betas=tuple(config.adam_betas),
            weight_decay=config.weight_decay,
        )
        self.step_log: list[StepRecord] = []
        self.detach_mse = False

    def losses(self, with_reg: bool = True):
        """Draw one step's randomness and return ``(l_mse, l_reg, g)``."""
        rng = self.diffusion_rng
        n = int(rng.integers(self.dataset.N))
        t = int(rng.integers(1, self.backend.descriptor.T_max + 1))
        prompt = self.prompts[int(rng.integers(len(self.prompts)))]
        latent = self.backend.add_noise(self.latents[n], t, rng)
        g = self.backend.encode_text(prompt, self.param).vector
        pred = self.backend.predict_noise(latent, g)
        if self.detach_mse:
            pred = pred.detach()
        l_mse = mse_noise_loss(pred, latent.noise)
        protos = sample_prototypes(self.dataset, self.cache, self.class_index, self.proto_rng)
        l_reg = discriminative_regularizer(g if with_reg else g.detach(), protos,
                                           self.config.scale_s)
        return l_mse, l_reg, g

    def step(self, alpha: float | None, beta: float | None) -> StepRecord:
        """One optimizer update. ``alpha=beta=None`` means plain reconstruction."""
        self.optimizer.zero_grad(set_to_none=True)
        if alpha is None:
            l_mse, l_reg, _ = self.losses(with_reg=False)
            total = l_mse
        else:
            l_mse, l_reg, _ = self.losses(with_reg=beta != 0)
            total = combined_loss(l_mse, l_reg, alpha, beta)
        if total.requires_grad:
            total.backward()
            self.optimizer.step()
        self.token.steps_trained += 1
        rec = StepRecord(len(self.step_log), l_mse.item(), l_reg.item(), total.item())
        self.step_log.append(rec)
        return rec

    def sync_token(self) -> ConceptToken:
        self.token.embedding = self.param.detach().clone()
        return self.token

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.step_log:
                fh.write(rec.to_json() + "\n")


def _wrap_step_error(job: TrainJob, exc: MCTIError, step: int) -> Exception:
    try:
        return type(exc)(f"{job.token.pseudo_word} step {step}: {exc}")
    except TypeError:
        return exc


def train_ti_warmup(job: TrainJob, steps: int | None = None) -> ConceptToken:
    """Reconstruction-only warm-up, then advance the token to the MC-TI phase."""
    if job.token.phase != Phase.WARMUP:
        raise PhaseError(f"{job.token.pseudo_word} is in phase {job.token.phase.value}, expected warmup")
    steps = job.config.warmup_steps if steps is None else steps
    for i in range(steps):
        try:
            job.step(None, None)
        except MCTIError as exc:
            raise _wrap_step_error(job, exc, i) from exc
    job.token.warmup_steps_done += steps
    job.token.phase = Phase.MCTI
    return job.sync_token()


def train_mcti(job: TrainJob, steps: int | None = None) -> ConceptToken:
    """Continue from the warm-up on ``alpha * l_mse + beta * l_reg``.

    The regularizer uses the same text feature that conditions the noise
    predictor in that step; prototypes come from the frozen cache, so the
    gradient reaches the token only through the text feature.
    """
    if job.token.phase != Phase.MCTI:
        raise PhaseError(f"{job.token.pseudo_word} has not finished its warm-up")
    steps = job.config.mcti_steps if steps is None else steps
    for i in range(steps):
        try:
            job.step(job.config.alpha, job.config.beta)
        except MCTIError as exc:
            raise _wrap_step_error(job, exc, i) from exc
    job.token.mcti_steps_done += steps
    return job.sync_token()


@dataclass
class ConceptResult:
    token: ConceptToken
    step_log: list[StepRecord]


def train_concept(class_index: int, dataset: FewShotDataset, cache: FeatureCache,
                  config: TrainConfig, backend, templates=None,
                  warm_token: ConceptToken | None = None,
                  skip_warmup: bool = False) -> ConceptResult:
    """Full schedule for one concept (warm-up unless skipped, then MC-TI)."""
    if warm_token is not None:
        token = warm_token.copy()
    else:
        token = init_token_embedding(config.init_word, backend, class_index)
    job = TrainJob(token, dataset, cache, config, backend, templates)
    if not skip_warmup:
        train_ti_warmup(job)
    elif token.phase != Phase.MCTI:
        raise PhaseError(f"cannot skip warm-up: {token.pseudo_word} is untrained")
    train_mcti(job)
    return ConceptResult(job.token, job.step_log)


def train_concepts(dataset: FewShotDataset, cache: FeatureCache, config: TrainConfig, backend,
                   parallelism: int = 1, classes: Sequence[int] | None = None,
                   templates=None, warm_tokens: Mapping[int, ConceptToken] | None = None,
                   skip_warmup: bool = False,
                   on_done: Callable[[int, ConceptResult], None] | None = None,
                   ) -> tuple[dict[int, ConceptResult], dict[int, str]]:
    """Train every concept, up to ``parallelism`` at a time.

    Returns ``(results, failures)``; a failure in one concept does not stop
    the others.
    """
    classes = list(classes or range(1, dataset.K + 1))
    cache.check_complete(dataset)
    templates = tuple(templates or PromptLibrary.default().training_templates)
    for k in classes:
        backend.register_pseudo_word(f"<s*_{k}>")
    warm_tokens = dict(warm_tokens or {})

    def run(k):
        return train_concept(k, dataset, cache, config, backend, templates,
                             warm_token=warm_tokens.get(k), skip_warmup=skip_warmup)

    results: dict[int, ConceptResult] = {}
    failures: dict[int, str] = {}
    with ThreadPoolExecutor(max_workers=max(1, int(parallelism))) as pool:
        futures = {k: pool.submit(run, k) for k in classes}
        for k in classes:
            try:
                results[k] = futures[k].result()
            except Exception as exc:  # noqa: BLE001 - reported per concept
                logger.error("concept %d failed: %s", k, exc)
                failures[k] = f"{type(exc).__name__}: {exc}"
                continue
            if on_done is not None:
                on_done(k, results[k])
    return results, failures


@dataclass
class UnifiedContext:
    """``M`` context vectors shared by all concepts of one dataset."""

    vectors: torch.Tensor
    trained_on: str = ""
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = torch.as_tensor(self.vectors, dtype=torch.float64).detach().clone()
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("context must be an (M, D_text) matrix with M >= 1")
        if not torch.isfinite(self.vectors).all():
            raise ValueError("context has non-finite entries")

    @property
    def M(self) -> int:
        return self.vectors.shape[0]


def text_features(tokens: Mapping[int, ConceptToken], backend, template: PromptTemplate = T1,
                  context: torch.Tensor | None = None) -> torch.Tensor:
    """Stack ``g_1..g_K`` (rows ordered by class index)."""
    rows = []
    for k in sorted(tokens):
        tok = tokens[k]
        backend.register_pseudo_word(tok.pseudo_word)
        prompt = render_prompt(template, tok, backend)
        rows.append(backend.encode_text(prompt, tok.embedding, context).vector)
    return torch.stack(rows)


def train_unified_context(tokens: Mapping[int, ConceptToken], dataset: FewShotDataset,
                          cache: FeatureCache, M: int, config: TrainConfig, backend,
                          epochs: int | None = None) -> UnifiedContext:
    """Learn ``M`` shared context vectors that replace the template words.

    Tokens stay frozen; the objective is the mean cross-entropy of the
    inference probabilities over all cached training features.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    missing = set(range(1, dataset.K + 1)) - set(tokens)
    if missing:
        raise MissingTokenError(missing)
    cache.check_complete(dataset)
    epochs = config.context_epochs if epochs is None else epochs
    rng = np.random.default_rng([int(config.rng_seed), 0xC0])
    D = backend.descriptor.D_text
    ctx = torch.nn.Parameter(torch.from_numpy(rng.standard_normal((M, D)) * 0.02))
    opt = torch.optim.AdamW([ctx], lr=config.context_lr, betas=tuple(config.adam_betas),
                            weight_decay=config.weight_decay)
    feats = torch.from_numpy(cache.matrix.astype(np.float64))
    feats = feats / feats.norm(dim=1, keepdim=True)
    labels = torch.from_numpy(cache.labels() - 1)
    frozen = {k: tokens[k] for k in range(1, dataset.K + 1)}
    history = []
    for _ in range(epochs):
        opt.zero_grad(set_to_none=True)
        G = text_features(frozen, backend, T1, ctx)
        G = G / G.norm(dim=1, keepdim=True)
        logits = config.scale_s * feats @ G.T
        loss = torch.nn.functional.cross_entropy(logits, labels)
        loss.backward()
        opt.step()
        history.append(loss.item())
    return UnifiedContext(ctx.detach(), trained_on=dataset.dataset_id, history=history)
