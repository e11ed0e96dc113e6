"""Backend selection.

``backend.name`` is either ``"toy"`` or ``"adapter:<module-path>"``. An
adapter module must expose ``load_backend(config: dict) -> Backend``; the
returned object has to honour the :class:`Backend` contract, including a
paired text/image encoder (mismatched pairs are unsupported).
"""

from __future__ import annotations

import importlib

from ..errors import ConfigError
from .base import Backend, BackendDescriptor, ImageFeature, LatentCode, TextFeature
from .toy import ToyBackend

__all__ = [
    "Backend",
    "BackendDescriptor",
    "ImageFeature",
    "LatentCode",
    "TextFeature",
    "ToyBackend",
    "load_backend",
]


def load_backend(config: dict | None = None) -> Backend:
    config = dict(config or {})
    name = config.pop("name", "toy")
    if name == "toy":
        try:
            return ToyBackend(**config)
        except TypeError as exc:
            raise ConfigError(f"invalid toy backend option: {exc}") from exc
    if name.startswith("adapter:"):
        module_path = name.split(":", 1)[1]
        try:
            module = importlib.import_module(module_path)
        except ImportError as exc:
            raise ConfigError(f"cannot import backend adapter {module_path!r}: {exc}") from exc
        if not hasattr(module, "load_backend"):
            raise ConfigError(f"adapter {module_path!r} has no load_backend(config)")
        backend = module.load_backend(config)
        if not isinstance(backend, Backend):
            raise ConfigError(f"adapter {module_path!r} did not return a Backend")
        return backend
    raise ConfigError(f"unknown backend {name!r}; expected 'toy' or 'adapter:<module>'")
