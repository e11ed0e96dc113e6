"""Run configuration: YAML file, JSON-schema validation, flag overrides.

Precedence, highest first: command-line flags, the YAML file, the
``MCTI_SEED`` environment variable (seeds only), built-in defaults.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .core import TrainConfig
from .errors import ConfigError

SEED_ENV = "MCTI_SEED"

DEFAULTS: dict[str, Any] = {
    "backend": {"name": "toy"},
    "dataset": {"layout": "class-subdirs", "N": 5},
    "train": {"parallelism": 1},
    "eval": {"template_id": "T1", "s": 10.0, "n_samples": 10, "use_context": False},
    "output": {"dir": ".", "cache_name": "features", "store_dir": "tokens"},
}


def schema() -> dict:
    return json.loads(resources.files("mcti.data").joinpath("config.schema.json").read_text("utf-8"))


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be a nonnegative integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError(f"{SEED_ENV} must be a nonnegative integer, got {raw!r}")
    return seed


def set_dotted(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


class RunConfig(dict):
    """Validated nested mapping with a few typed views."""

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    def train_config(self) -> TrainConfig:
        allowed = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in self.get("train", {}).items() if k in allowed}
        kw.setdefault("rng_seed", self.seed)
        try:
            return TrainConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train config: {exc}") from exc

    @property
    def split_seed(self) -> int:
        return int(self["dataset"].get("split_seed", self.seed))

    def section(self, name: str) -> dict:
        return self.get(name, {})

    def out_path(self, *parts: str) -> Path:
        return Path(self["output"]["dir"]).joinpath(*parts)


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read ``path`` (YAML or JSON), apply dotted-key ``overrides``, validate."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    cfg = _merge(DEFAULTS, data)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_dotted(cfg, key, value)
    if "seed" not in cfg:
        seed = env_seed()
        cfg["seed"] = 0 if seed is None else seed
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    return RunConfig(cfg)
