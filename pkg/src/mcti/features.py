"""Dataset ingestion, N-shot sampling and the pre-extracted feature cache.

Cache files come in pairs: ``<name>.manifest.json`` and ``<name>.feat.bin``.
The blob holds float32 little-endian rows ordered by (class, sample); the
manifest records the ordering, the backend fingerprint and the blob's SHA-256.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FewShotDataset
from .errors import (
    CacheIncompleteError,
    ChecksumMismatchError,
    DecodeError,
    DuplicateSampleError,
    EmptyClassError,
    FingerprintMismatchError,
    InsufficientSamplesError,
    ShapeError,
    UnreadablePathError,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".npy", ".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
CACHE_VERSION = 1


@dataclass(frozen=True)
class DatasetIndex:
    """All samples of a split. ``samples[k]`` lists class ``k``'s refs (k is 1-based)."""

    dataset_id: str
    class_names: tuple[str, ...]
    samples: dict[int, tuple[str, ...]]

    @property
    def K(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return sum(len(v) for v in self.samples.values())

    def items(self):
        """``(class_index, ref)`` pairs in index order."""
        for k in sorted(self.samples):
            for ref in self.samples[k]:
                yield k, ref


def ingest_dataset(root_path, layout: str = "class-subdirs", dataset_id: str | None = None) -> DatasetIndex:
    """Index a directory of images.

    ``class-subdirs``: one subdirectory per class, sorted by name.
    ``manifest-file``: ``root_path`` is a CSV with ``path,label`` columns;
    relative paths resolve against the CSV's directory.
    """
    root = Path(root_path)
    if not root.exists():
        raise UnreadablePathError(f"unreadable-path: {root} does not exist")
    if layout == "class-subdirs":
        if not root.is_dir():
            raise UnreadablePathError(f"unreadable-path: {root} is not a directory")
        by_class: dict[str, list[str]] = {}
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(str(f) for f in sub.iterdir()
                           if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise EmptyClassError(f"class directory {sub} contains no images")
            by_class[sub.name] = files
        if not by_class:
            raise EmptyClassError(f"{root} contains no class subdirectories")
    elif layout == "manifest-file":
        by_class = {}
        seen = set()
        try:
            with open(root, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise UnreadablePathError(f"unreadable-path: {root}: {exc}") from exc
        for i, row in enumerate(rows):
            if not row.get("path") or not row.get("label"):
                raise ValueError(f"manifest row {i + 2} needs 'path' and 'label'")
            path = Path(row["path"])
            if not path.is_absolute():
                path = root.parent / path
            key = str(path.resolve())
            if key in seen:
                raise DuplicateSampleError(f"duplicate sample {row['path']} in manifest")
            seen.add(key)
            by_class.setdefault(row["label"], []).append(str(path))
        if not by_class:
            raise EmptyClassError(f"manifest {root} has no rows")
        by_class = {label: sorted(paths) for label, paths in sorted(by_class.items())}
    else:
        raise ValueError(f"unknown layout {layout!r}")
    names = tuple(by_class)
    samples = {k: tuple(by_class[name]) for k, name in enumerate(names, start=1)}
    return DatasetIndex(dataset_id or root.stem, names, samples)


def sample_nshot(index: DatasetIndex, N: int, seed: int) -> FewShotDataset:
    """Draw ``N`` samples per class without replacement, reproducibly."""
    if N < 1:
        raise ValueError("N must be positive")
    rng = np.random.default_rng(seed)
    samples = {}
    for k in range(1, index.K + 1):
        refs = index.samples[k]
        if len(refs) < N:
            raise InsufficientSamplesError(
                f"class {k} ({index.class_names[k - 1]}) has {len(refs)} samples, {N} requested"
            )
        chosen = sorted(rng.choice(len(refs), size=N, replace=False))
        samples[k] = tuple(refs[i] for i in chosen)
    return FewShotDataset(K=index.K, N=N, samples=samples, split_seed=seed,
                          dataset_id=index.dataset_id)


def remainder(index: DatasetIndex, ds: FewShotDataset) -> list[tuple[str, int]]:
    """Samples of ``index`` not used by ``ds``, as ``(ref, class)`` pairs."""
    used = {str(r) for refs in ds.samples.values() for r in refs}
    return [(ref, k) for k, ref in index.items() if str(ref) not in used]


@dataclass
class FeatureCache:
    fingerprint: str
    dataset_id: str
    K: int
    N: int
    keys: list[tuple[int, int]]
    matrix: np.ndarray
    refs: list[str] = field(default_factory=list)
    created_at: str = ""

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype="<f4")
        self._rows = {tuple(k): i for i, k in enumerate(self.keys)}

    @property
    def D_feat(self) -> int:
        return self.matrix.shape[1]

    @property
    def entries(self) -> dict[tuple[int, int], np.ndarray]:
        return {k: self.matrix[i] for k, i in self._rows.items()}

    def feature(self, k: int, n: int) -> np.ndarray:
        try:
            return self.matrix[self._rows[(k, n)]]
        except KeyError:
            raise CacheIncompleteError(f"cache has no entry for sample ({k}, {n})") from None

    def class_features(self, k: int) -> np.ndarray:
        return np.stack([self.feature(k, n) for n in range(1, self.N + 1)])

    def check_complete(self, ds: FewShotDataset | None = None) -> None:
        K, N = (ds.K, ds.N) if ds is not None else (self.K, self.N)
        missing = [(k, n) for k in range(1, K + 1) for n in range(1, N + 1)
                   if (k, n) not in self._rows]
        if missing or len(self._rows) != K * N:
            raise CacheIncompleteError(
                f"cache has {len(self._rows)} entries for K*N={K * N}; missing {missing[:5]}"
            )

    def checksum(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()

    def labels(self) -> np.ndarray:
        return np.array([k for k, _ in self.keys])


def build_feature_cache(ds: FewShotDataset, backend) -> FeatureCache:
    rows = []
    for k, n in ds.keys():
        ref = ds.ref(k, n)
        try:
            rows.append(backend.encode_image(ref).vector)
        except (DecodeError, ShapeError) as exc:
            raise type(exc)(f"sample ({k}, {n}) [{ref}]: {exc}") from exc
    return FeatureCache(
        fingerprint=backend.fingerprint(),
        dataset_id=ds.dataset_id,
        K=ds.K,
        N=ds.N,
        keys=ds.keys(),
        matrix=np.stack(rows),
        refs=[str(ds.ref(k, n)) if not isinstance(ds.ref(k, n), np.ndarray) else f"array:{k}:{n}"
              for k, n in ds.keys()],
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )


def _cache_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".manifest.json", ".feat.bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(f"{name}.manifest.json"), path.with_name(f"{name}.feat.bin")


def save_cache(cache: FeatureCache, path) -> Path:
    """Write the manifest + blob pair; returns the manifest path."""
    manifest_path, blob_path = _cache_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob = cache.matrix.astype("<f4").tobytes()
    blob_path.write_bytes(blob)
    manifest = {
        "version": CACHE_VERSION,
        "dataset_id": cache.dataset_id,
        "K": cache.K,
        "N": cache.N,
        "D_feat": cache.D_feat,
        "dtype": "float32-le",
        "backend_fingerprint": cache.fingerprint,
        "sample_ordering": [[k, n] for k, n in cache.keys],
        "refs": cache.refs,
        "created_at": cache.created_at,
        "checksum": hashlib.sha256(blob).hexdigest(),
        "blob": blob_path.name,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest_path


def load_cache(path, backend=None, fingerprint: str | None = None) -> FeatureCache:
    """Load and verify a cache; rejects a fingerprint other than the active backend's."""
    manifest_path, _ = _cache_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UnreadablePathError(f"unreadable-path: {manifest_path}: {exc}") from exc
    blob_path = manifest_path.with_name(manifest["blob"])
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise UnreadablePathError(f"unreadable-path: {blob_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ChecksumMismatchError(f"checksum mismatch for {blob_path}")
    expected = fingerprint or (backend.fingerprint() if backend is not None else None)
    if expected is not None and expected != manifest["backend_fingerprint"]:
        raise FingerprintMismatchError(
            f"cache built with {manifest['backend_fingerprint']}, active backend is {expected}"
        )
    keys = [tuple(k) for k in manifest["sample_ordering"]]
    matrix = np.frombuffer(blob, dtype="<f4").reshape(len(keys), manifest["D_feat"]).copy()
    return FeatureCache(
        fingerprint=manifest["backend_fingerprint"],
        dataset_id=manifest["dataset_id"],
        K=manifest["K"],
        N=manifest["N"],
        keys=keys,
        matrix=matrix,
        refs=list(manifest.get("refs", [])),
        created_at=manifest.get("created_at", ""),
    )


def encode_split(samples: Sequence[tuple[object, int]], backend) -> tuple[np.ndarray, np.ndarray]:
    """Encode ``(ref, label)`` pairs; returns ``(features, labels)``."""
    if not samples:
        return np.zeros((0, backend.descriptor.D_feat)), np.zeros(0, dtype=int)
    feats = []
    for ref, _ in samples:
        try:
            feats.append(backend.encode_image(ref).vector)
        except DecodeError as exc:
            raise DecodeError(f"{ref}: {exc}") from exc
    return np.stack(feats), np.array([k for _, k in samples])


def dataset_from_cache(cache: FeatureCache) -> FewShotDataset:
    """Rebuild the few-shot split a cache was extracted from (path refs only)."""
    if len(cache.refs) != len(cache.keys) or any(r.startswith("array:") for r in cache.refs):
        raise CacheIncompleteError("cache does not record the image paths it was built from")
    samples: dict[int, list[str]] = {}
    for (k, n), ref in sorted(zip(cache.keys, cache.refs)):
        samples.setdefault(k, []).append(ref)
    return FewShotDataset(K=cache.K, N=cache.N, samples={k: tuple(v) for k, v in samples.items()},
                          dataset_id=cache.dataset_id)
