"""On-disk store for learned concept tokens and an optional shared context.

Layout of a store directory::

    manifest.json   metadata, per-token records, blob checksums
    tokens.bin      float64 little-endian rows, one per token, class order
    context.bin     float64 little-endian (M, D_text) matrix, if present

Nothing time-dependent is written, so the same training run always produces
byte-identical files regardless of how many concepts trained concurrently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ConceptToken, Phase, TrainConfig
from .errors import (
    ChecksumMismatchError,
    FingerprintMismatchError,
    MissingTokenError,
    UnreadablePathError,
)
from .trainer import UnifiedContext

STORE_VERSION = "1"
MANIFEST = "manifest.json"
TOKENS_BLOB = "tokens.bin"
CONTEXT_BLOB = "context.bin"


@dataclass
class TokenStore:
    tokens: dict[int, ConceptToken]
    fingerprint: str
    dataset_id: str
    K: int
    N: int
    config: dict = field(default_factory=dict)
    context: UnifiedContext | None = None
    version: str = STORE_VERSION

    @classmethod
    def from_training(cls, tokens, *, backend, dataset, config: TrainConfig) -> "TokenStore":
        return cls(dict(sorted(tokens.items())), backend.fingerprint(), dataset.dataset_id,
                   dataset.K, dataset.N, config.to_dict())

    def check_complete(self) -> None:
        missing = set(range(1, self.K + 1)) - set(self.tokens)
        if missing:
            raise MissingTokenError(missing)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        order = sorted(self.tokens)
        if order:
            rows = np.stack([self.tokens[k].embedding.numpy() for k in order])
        else:
            rows = np.zeros((0, 0))
        blob = rows.astype("<f8").tobytes()
        (directory / TOKENS_BLOB).write_bytes(blob)
        records = []
        for row, k in enumerate(order):
            t = self.tokens[k]
            records.append({
                "class": k, "row": row, "concept_id": t.concept_id,
                "pseudo_word": t.pseudo_word, "init_word": t.init_word,
                "phase": t.phase.value, "steps_trained": t.steps_trained,
                "warmup_steps_done": t.warmup_steps_done,
                "mcti_steps_done": t.mcti_steps_done,
                "seed": self.config.get("rng_seed"),
            })
        manifest = {
            "version": self.version,
            "backend_fingerprint": self.fingerprint,
            "dataset_id": self.dataset_id,
            "K": self.K,
            "N": self.N,
            "D_text": int(rows.shape[1]) if order else 0,
            "dtype": "float64-le",
            "config": self.config,
            "tokens": records,
            "tokens_blob": TOKENS_BLOB,
            "tokens_sha256": hashlib.sha256(blob).hexdigest(),
        }
        ctx_path = directory / CONTEXT_BLOB
        if self.context is not None:
            cblob = self.context.vectors.numpy().astype("<f8").tobytes()
            ctx_path.write_bytes(cblob)
            manifest["context"] = {
                "blob": CONTEXT_BLOB, "M": self.context.M,
                "trained_on": self.context.trained_on,
                "sha256": hashlib.sha256(cblob).hexdigest(),
            }
        elif ctx_path.exists():
            ctx_path.unlink()
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory, backend=None) -> "TokenStore":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
            blob = (directory / manifest["tokens_blob"]).read_bytes()
        except OSError as exc:
            raise UnreadablePathError(f"unreadable-path: {directory}: {exc}") from exc
        if hashlib.sha256(blob).hexdigest() != manifest["tokens_sha256"]:
            raise ChecksumMismatchError(f"token blob checksum mismatch in {directory}")
        if backend is not None and backend.fingerprint() != manifest["backend_fingerprint"]:
            raise FingerprintMismatchError(
                f"tokens trained with {manifest['backend_fingerprint']}, "
                f"active backend is {backend.fingerprint()}")
        D = manifest["D_text"]
        rows = np.frombuffer(blob, dtype="<f8").reshape(-1, D) if D else np.zeros((0, 0))
        tokens = {}
        for rec in manifest["tokens"]:
            tokens[rec["class"]] = ConceptToken(
                concept_id=rec["concept_id"], pseudo_word=rec["pseudo_word"],
                embedding=torch.from_numpy(rows[rec["row"]].copy()), init_word=rec["init_word"],
                steps_trained=rec["steps_trained"], phase=Phase(rec["phase"]),
                warmup_steps_done=rec["warmup_steps_done"], mcti_steps_done=rec["mcti_steps_done"],
            )
        context = None
        if "context" in manifest:
            c = manifest["context"]
            cblob = (directory / c["blob"]).read_bytes()
            if hashlib.sha256(cblob).hexdigest() != c["sha256"]:
                raise ChecksumMismatchError(f"context blob checksum mismatch in {directory}")
            vec = np.frombuffer(cblob, dtype="<f8").reshape(c["M"], -1).copy()
            context = UnifiedContext(torch.from_numpy(vec), trained_on=c["trained_on"])
        return cls(tokens, manifest["backend_fingerprint"], manifest["dataset_id"],
                   manifest["K"], manifest["N"], manifest.get("config", {}), context,
                   manifest["version"])

    def checksum(self) -> str:
        """Digest of every token embedding (and the context, if any)."""
        h = hashlib.sha256()
        for k in sorted(self.tokens):
            h.update(self.tokens[k].embedding.numpy().astype("<f8").tobytes())
        if self.context is not None:
            h.update(self.context.vectors.numpy().astype("<f8").tobytes())
        return h.hexdigest()
