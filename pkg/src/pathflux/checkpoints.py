"""Self-describing JSON checkpoints: parameters, config echo, format version."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ConfigError

FORMAT_VERSION = 1


def save_checkpoint(path, store, config, extra=None):
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "extra": extra or {},
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
            for name, p in store.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    tmp.replace(path)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version: {version}")
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return payload["config"], params, payload.get("extra", {})
